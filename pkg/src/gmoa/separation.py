"""Cluster-separation objective: mean pairwise Bhattacharyya distance plus a
log-weight barrier, with its exact gradient in packed coordinates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mixture import MixtureParams


@dataclass
class SeparationReport:
    g: float
    pairwise_bd: np.ndarray
    weight_penalty: float


def bhattacharyya(mean_i, var_i, mean_j, var_j) -> float:
    """Bhattacharyya distance between two diagonal Gaussians."""
    mean_i, var_i, mean_j, var_j = (np.atleast_1d(np.asarray(a, dtype=float))
                                    for a in (mean_i, var_i, mean_j, var_j))
    if np.any(var_i <= 0) or np.any(var_j <= 0):
        raise ValueError("variances must be positive")
    avg = 0.5 * (var_i + var_j)
    diff = mean_i - mean_j
    quad = 0.125 * np.sum(diff**2 / avg)
    logdet = 0.5 * np.sum(np.log(avg) - 0.5 * (np.log(var_i) + np.log(var_j)))
    return float(quad + logdet)


def g_value(params: MixtureParams) -> SeparationReport:
    K = params.n_components
    if np.any(params.weights <= 0):
        raise ValueError("separation objective needs strictly positive weights")
    bd = np.zeros((K, K))
    for i in range(K):
        for j in range(i + 1, K):
            bd[i, j] = bd[j, i] = bhattacharyya(
                params.means[i], params.variances[i], params.means[j], params.variances[j]
            )
    penalty = float(np.sum(np.log(params.weights)))
    iu = np.triu_indices(K, 1)
    mean_bd = float(np.mean(bd[iu])) if K > 1 else 0.0
    return SeparationReport(mean_bd + penalty, bd, penalty)


def grad_g(params: MixtureParams) -> np.ndarray:
    """Gradient of ``g_value(params).g`` w.r.t. packed ``(mu, var, pi)``.

    Per pair, with ``s = (v_i + v_j) / 2`` and ``D = mu_i - mu_j``:
    ``dBD/dmu_i = D / (4 s)`` and
    ``dBD/dv_i = -D^2 / (16 s^2) + 1 / (4 s) - 1 / (4 v_i)``.
    """
    K, d = params.n_components, params.dim
    if np.any(params.weights <= 0):
        raise ValueError("separation objective needs strictly positive weights")
    scale = 2.0 / (K * (K - 1))
    g_mean = np.zeros((K, d))
    g_var = np.zeros((K, d))
    mu, v = params.means, params.variances
    for i in range(K):
        for j in range(i + 1, K):
            s = 0.5 * (v[i] + v[j])
            D = mu[i] - mu[j]
            dmu = D / (4.0 * s)
            g_mean[i] += scale * dmu
            g_mean[j] -= scale * dmu
            common = -(D**2) / (16.0 * s**2) + 1.0 / (4.0 * s)
            g_var[i] += scale * (common - 1.0 / (4.0 * v[i]))
            g_var[j] += scale * (common - 1.0 / (4.0 * v[j]))
    g_w = 1.0 / params.weights
    return MixtureParams(g_mean, g_var, g_w).pack()
