"""Diagonal-covariance Gaussian mixture density and its derivatives.

All derivative code works on the flat packed vector ``u`` whose layout is
``(mu_1, var_1, pi_1, ..., mu_K, var_K, pi_K)`` with ``mu_k`` and ``var_k``
each of length ``d``. Variances (not standard deviations) are the packed
coordinates, so finite-difference perturbations happen in variance space.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

LOG_2PI = np.log(2.0 * np.pi)

VAR_FLOOR = 1e-6
WEIGHT_FLOOR = 1e-4


class VarianceClampWarning(RuntimeWarning):
    """A perturbed parameter copy had a variance pushed below the floor."""


@dataclass
class MixtureParams:
    """Means ``(K, d)``, diagonal variances ``(K, d)`` and weights ``(K,)``."""

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.variances.shape != self.means.shape:
            raise ValueError(
                f"variances shape {self.variances.shape} != means shape {self.means.shape}"
            )
        if self.weights.shape[0] != self.means.shape[0]:
            raise ValueError("need one weight per component")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def size(self) -> int:
        return packed_size(self.n_components, self.dim)

    def pack(self) -> np.ndarray:
        K, d = self.means.shape
        blocks = np.concatenate(
            [self.means, self.variances, self.weights[:, None]], axis=1
        )
        return blocks.reshape(K * (2 * d + 1)).copy()

    @classmethod
    def unpack(cls, u, n_components: int, dim: int) -> "MixtureParams":
        u = np.asarray(u, dtype=float)
        if u.shape != (packed_size(n_components, dim),):
            raise ValueError(
                f"packed vector has shape {u.shape}, expected ({packed_size(n_components, dim)},)"
            )
        blocks = u.reshape(n_components, 2 * dim + 1)
        return cls(
            blocks[:, :dim].copy(), blocks[:, dim : 2 * dim].copy(), blocks[:, 2 * dim].copy()
        )

    def copy(self) -> "MixtureParams":
        return MixtureParams(self.means.copy(), self.variances.copy(), self.weights.copy())

    def permuted(self, order) -> "MixtureParams":
        order = np.asarray(order)
        return MixtureParams(self.means[order], self.variances[order], self.weights[order])

    def validate(self, var_floor: float = VAR_FLOOR) -> None:
        """Raise ``ValueError`` unless the parameters are a valid mixture."""
        if self.n_components < 2:
            raise ValueError("a mixture needs K >= 2 components")
        if np.any(self.variances < var_floor):
            raise ValueError(f"variances must be >= {var_floor}")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MixtureParams":
        return cls(data["means"], data["variances"], data["weights"])


def packed_size(n_components: int, dim: int) -> int:
    return n_components * (2 * dim + 1)


def mean_index(k: int, j: int, dim: int) -> int:
    return k * (2 * dim + 1) + j


def var_index(k: int, j: int, dim: int) -> int:
    return k * (2 * dim + 1) + dim + j


def weight_index(k: int, dim: int) -> int:
    return k * (2 * dim + 1) + 2 * dim


def gaussian_logpdf(z, mean, variance) -> float:
    """Log density of a diagonal Gaussian at a single point ``z``."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    variance = np.atleast_1d(np.asarray(variance, dtype=float))
    if np.any(variance <= 0):
        raise ValueError("variance entries must be positive")
    d = z.shape[0]
    return float(
        -0.5 * d * LOG_2PI
        - 0.5 * np.sum(np.log(variance))
        - 0.5 * np.sum((z - mean) ** 2 / variance)
    )


def component_logpdf(params: MixtureParams, Z) -> np.ndarray:
    """``(N, K)`` matrix of ``log N(z_i; mu_k, Sigma_k)`` (weights excluded)."""
    Z = _as_points(Z, params.dim)
    var = params.variances
    if np.any(var <= 0):
        raise ValueError("variance entries must be positive")
    diff = Z[:, None, :] - params.means[None, :, :]
    quad = np.sum(diff**2 / var[None, :, :], axis=2)
    logdet = np.sum(np.log(var), axis=1)
    return -0.5 * (params.dim * LOG_2PI + logdet[None, :] + quad)


def _weighted_logpdf(params: MixtureParams, Z) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logw = np.log(params.weights)
    return component_logpdf(params, Z) + logw[None, :]


def _row_logsumexp(a: np.ndarray) -> np.ndarray:
    top = np.max(a, axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return (top + np.log(np.sum(np.exp(a - top), axis=1, keepdims=True)))[:, 0]


def e_step(params: MixtureParams, Z) -> tuple[np.ndarray, float]:
    """Responsibilities and the NLL from a single pass over the data."""
    lw = _weighted_logpdf(params, Z)
    lse = _row_logsumexp(lw)
    return np.exp(lw - lse[:, None]), float(-np.sum(lse))


def mixture_nll(params: MixtureParams, Z) -> float:
    """Negative log likelihood ``-sum_i log sum_k pi_k N(z_i; mu_k, Sigma_k)``."""
    Z = _as_points(Z, params.dim)
    if Z.shape[0] == 0:
        raise ValueError("mixture_nll needs at least one point")
    return float(-np.sum(_row_logsumexp(_weighted_logpdf(params, Z))))


def responsibilities(params: MixtureParams, Z) -> np.ndarray:
    """Posterior component probabilities, one row per point."""
    return e_step(params, Z)[0]


def grad_nll_u_analytic(params: MixtureParams, Z) -> np.ndarray:
    """Exact gradient of :func:`mixture_nll` in packed coordinates.

    The weight block is the unconstrained partial ``-N_k / pi_k``; projecting
    onto the simplex is left to the caller (see :func:`reduced_basis`).
    """
    Z = _as_points(Z, params.dim)
    R = responsibilities(params, Z)
    var = params.variances
    diff = Z[:, None, :] - params.means[None, :, :]
    g_mean = -np.einsum("nk,nkj->kj", R, diff) / var
    g_var = -0.5 * (np.einsum("nk,nkj->kj", R, diff**2) / var**2 - R.sum(0)[:, None] / var)
    g_w = -R.sum(0) / params.weights
    return MixtureParams(g_mean, g_var, g_w).pack()


def grad_nll_z(params: MixtureParams, Z) -> np.ndarray:
    """Per-point sensitivities ``dE/dz_i``, shape ``(N, d)``."""
    Z = _as_points(Z, params.dim)
    R = responsibilities(params, Z)
    diff = Z[:, None, :] - params.means[None, :, :]
    return np.einsum("nk,nkj->nj", R, diff / params.variances[None, :, :])


def perturbed(params: MixtureParams, direction, step: float, var_floor: float = VAR_FLOOR):
    """``params + step * direction`` in packed space, clamping variances."""
    K, d = params.n_components, params.dim
    out = MixtureParams.unpack(params.pack() + step * np.asarray(direction), K, d)
    low = out.variances < var_floor
    if np.any(low):
        warnings.warn(
            f"perturbation pushed {int(low.sum())} variance(s) below {var_floor}; clamped",
            VarianceClampWarning,
            stacklevel=2,
        )
        out.variances[low] = var_floor
    return out


def grad_nll_u_fd(params: MixtureParams, Z, delta: float = 1e-5, basis=None) -> np.ndarray:
    """Central-difference gradient of the NLL.

    With ``basis`` (an ``(m, r)`` matrix) the differences are taken along its
    columns, giving the gradient in the reduced coordinates it spans.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    Z = _as_points(Z, params.dim)
    if basis is None:
        basis = np.eye(params.size)
    h = np.empty(basis.shape[1])
    for j in range(basis.shape[1]):
        col = basis[:, j]
        up = mixture_nll(perturbed(params, col, delta), Z)
        down = mixture_nll(perturbed(params, col, -delta), Z)
        h[j] = (up - down) / (2.0 * delta)
    return h


def hessian_nll_u(params: MixtureParams, Z, delta: float = 1e-5, basis=None,
                  return_raw: bool = False):
    """Hessian of the NLL via central differences of the analytic gradient.

    The returned matrix is symmetrized; ``return_raw`` also hands back the
    unsymmetrized finite-difference matrix.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    Z = _as_points(Z, params.dim)
    if basis is None:
        basis = np.eye(params.size)
    r = basis.shape[1]
    H = np.empty((r, r))
    for j in range(r):
        col = basis[:, j]
        g_up = grad_nll_u_analytic(perturbed(params, col, delta), Z)
        g_down = grad_nll_u_analytic(perturbed(params, col, -delta), Z)
        H[:, j] = basis.T @ (g_up - g_down) / (2.0 * delta)
    sym = 0.5 * (H + H.T)
    if return_raw:
        return sym, H
    return sym


def reduced_basis(n_components: int, dim: int, free_means: bool = True,
                  free_variances: bool = True, free_weights: bool = True,
                  isotropic: bool = False, eliminate_last_weight: bool = True) -> np.ndarray:
    """Columns spanning the admissible directions of the packed vector.

    Each column is one reduced coordinate. Fixed blocks get no column. With
    ``isotropic`` a component's ``d`` variances move together. With
    ``eliminate_last_weight`` the weight of component ``k < K`` moves against
    ``pi_K`` so the simplex sum is preserved.
    """
    K, d = n_components, dim
    m = packed_size(K, d)
    cols = []
    for k in range(K):
        if free_means:
            for j in range(d):
                c = np.zeros(m)
                c[mean_index(k, j, d)] = 1.0
                cols.append(c)
        if free_variances:
            if isotropic:
                c = np.zeros(m)
                c[[var_index(k, j, d) for j in range(d)]] = 1.0
                cols.append(c)
            else:
                for j in range(d):
                    c = np.zeros(m)
                    c[var_index(k, j, d)] = 1.0
                    cols.append(c)
        if free_weights and not (eliminate_last_weight and k == K - 1):
            c = np.zeros(m)
            c[weight_index(k, d)] = 1.0
            if eliminate_last_weight:
                c[weight_index(K - 1, d)] = -1.0
            cols.append(c)
    if not cols:
        return np.zeros((m, 0))
    return np.stack(cols, axis=1)


def naive_mixture_nll(params: MixtureParams, Z) -> float:
    """Direct summation without log-sum-exp; underflows for distant points."""
    Z = _as_points(Z, params.dim)
    dens = np.exp(component_logpdf(params, Z)) * params.weights[None, :]
    return float(-np.sum(np.log(dens.sum(axis=1))))


def _as_points(Z, dim: int) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z.reshape(-1, dim) if dim > 1 else Z[:, None]
    if Z.shape[1] != dim:
        raise ValueError(f"points have dimension {Z.shape[1]}, mixture has {dim}")
    return Z


@dataclass(frozen=True)
class Knowns:
    """Mixture blocks held fixed during fitting and differentiation.

    ``variances`` has shape ``(K, d)`` and ``weights`` shape ``(K,)``; ``None``
    leaves the block free. ``isotropic`` ties each component's free variances
    to a single shared value.
    """

    variances: np.ndarray | None = None
    weights: np.ndarray | None = None
    isotropic: bool = False

    def apply(self, params: MixtureParams) -> MixtureParams:
        out = params.copy()
        if self.variances is not None:
            out.variances = np.broadcast_to(
                np.asarray(self.variances, dtype=float), out.variances.shape
            ).copy()
        elif self.isotropic:
            out.variances = np.repeat(out.variances.mean(axis=1, keepdims=True), out.dim, axis=1)
        if self.weights is not None:
            out.weights = np.asarray(self.weights, dtype=float).reshape(-1).copy()
        return out

    def basis(self, n_components: int, dim: int, eliminate_last_weight: bool = True):
        return reduced_basis(
            n_components,
            dim,
            free_variances=self.variances is None,
            free_weights=self.weights is None,
            isotropic=self.isotropic,
            eliminate_last_weight=eliminate_last_weight,
        )

    def to_dict(self) -> dict:
        return {
            "variances": None if self.variances is None else np.asarray(self.variances).tolist(),
            "weights": None if self.weights is None else np.asarray(self.weights).tolist(),
            "isotropic": self.isotropic,
        }


FREE = Knowns()
