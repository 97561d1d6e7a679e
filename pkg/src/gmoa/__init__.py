"""Joint dimension reduction and Gaussian-mixture clustering by manifold ascent."""

__version__ = "0.1.0"
