import numpy as np
import pytest

from gmoa.mixture import MixtureParams


def random_params(rng, K, d, var_lo=0.5, var_hi=2.0, spread=3.0):
    means = rng.normal(scale=spread, size=(K, d))
    variances = rng.uniform(var_lo, var_hi, size=(K, d))
    w = rng.uniform(0.5, 1.5, size=K)
    return MixtureParams(means, variances, w / w.sum())


def central_diff(f, x, h=1e-6):
    """Plain central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def rel_err(a, b, floor=1.0):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
