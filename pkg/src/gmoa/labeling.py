"""Cluster assignment, a k-means baseline, and Hungarian-matched accuracy."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .mixture import MixtureParams, component_logpdf


@dataclass
class LabelResult:
    labels: np.ndarray
    per_point_loglik: np.ndarray | None = None


def assign_labels(u: MixtureParams, theta, X, weighted: bool = False) -> LabelResult:
    """Label each point by its most likely component.

    By default the component likelihood alone decides (no mixing weight);
    ``weighted=True`` uses the posterior instead. Ties go to the lowest index.
    """
    Z = theta.project(X) if theta is not None else np.asarray(X, dtype=float)
    ll = component_logpdf(u, Z)
    if weighted:
        ll = ll + np.log(u.weights)[None, :]
    return LabelResult(np.argmax(ll, axis=1), ll)


def _kmeanspp(Z, K, rng):
    N = Z.shape[0]
    centers = [Z[rng.integers(N)]]
    d2 = np.sum((Z - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(N))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, N - 1)
        centers.append(Z[idx])
        d2 = np.minimum(d2, np.sum((Z - Z[idx]) ** 2, axis=1))
    return np.array(centers, dtype=float)


@dataclass
class KMeansResult(LabelResult):
    centers: np.ndarray | None = None
    inertia: float = 0.0
    iters: int = 0


def kmeans(Z, K: int, seed: int = 0, max_iters: int = 300) -> KMeansResult:
    """Lloyd iterations from a k-means++ start.

    An emptied cluster is moved to the point farthest from its assigned center.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    N = Z.shape[0]
    if N < K:
        raise ValueError(f"need at least K={K} points, got {N}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(Z, K, rng)
    labels = np.full(N, -1)
    it = 0
    for it in range(1, max_iters + 1):
        d2 = np.sum((Z[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new = np.argmin(d2, axis=1)
        for k in range(K):
            if not np.any(new == k):
                far = int(np.argmax(d2[np.arange(N), new]))
                new[far] = k
        if np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([Z[labels == k].mean(axis=0) for k in range(K)])
    inertia = float(np.sum((Z - centers[labels]) ** 2))
    return KMeansResult(labels, None, centers, inertia, it)


def contingency(pred, truth, K: int) -> np.ndarray:
    C = np.zeros((K, K), dtype=int)
    np.add.at(C, (np.asarray(pred), np.asarray(truth)), 1)
    return C


def hungarian_accuracy(pred, truth, K: int):
    """Best one-to-one matching of predicted clusters to true classes.

    Returns ``(accuracy, mapping)`` where ``mapping[p]`` is the class matched
    to predicted cluster ``p``.
    """
    pred = np.asarray(pred, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth must have the same length")
    if pred.size == 0:
        return 1.0, np.arange(K)
    if pred.min() < 0 or truth.min() < 0 or pred.max() >= K or truth.max() >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    C = contingency(pred, truth, K)
    rows, cols = linear_sum_assignment(-C)
    mapping = np.empty(K, dtype=int)
    mapping[rows] = cols
    return float(C[rows, cols].sum() / pred.size), mapping


def save_labels_csv(path, pred, truth=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if truth is None:
            w.writerow(["id", "pred"])
            w.writerows([i, int(p)] for i, p in enumerate(pred))
        else:
            w.writerow(["id", "pred", "truth"])
            w.writerows([i, int(p), int(t)] for i, (p, t) in enumerate(zip(pred, truth)))
