"""Dimension-reduction maps with hand-written reverse-mode gradients.

Every reducer exposes ``project(X)``, ``backward(X, dZ)`` (the pullback of
per-output sensitivities onto the flat parameter vector), ``flat()`` and
``with_flat(v)``. Parameters are laid out in a fixed order so that gradients
and flat vectors line up one-to-one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class ReducerError(ValueError):
    pass


class DegenerateOutputError(ReducerError):
    pass


def _points(X, p: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ReducerError("X must be a nonempty (N, p) array")
    if X.shape[1] != p:
        raise ReducerError(f"X has {X.shape[1]} columns, reducer expects {p}")
    return X


@dataclass
class Angle2D:
    """``x -> cos(t) x1 + sin(t) x2``."""

    theta: float
    kind = "angle2d"

    in_dim = 2
    out_dim = 1

    def direction(self) -> np.ndarray:
        return np.array([np.cos(self.theta), np.sin(self.theta)])

    def project(self, X) -> np.ndarray:
        X = _points(X, 2)
        return (X @ self.direction())[:, None]

    def backward(self, X, dZ) -> np.ndarray:
        X = _points(X, 2)
        dZ = _sens(dZ, X.shape[0], 1)
        t = self.theta
        da = np.array([-np.sin(t), np.cos(t)])
        return np.array([dZ[:, 0] @ (X @ da)])

    def flat(self) -> np.ndarray:
        return np.array([self.theta], dtype=float)

    def with_flat(self, v) -> "Angle2D":
        return Angle2D(float(np.asarray(v).reshape(-1)[0]))

    def to_dict(self) -> dict:
        return {"type": self.kind, "theta": [float(self.theta)]}


@dataclass
class Angle3D:
    """``x -> (cos t1, sin t1 cos t2, sin t1 sin t2) . x``."""

    theta1: float
    theta2: float
    kind = "angle3d"

    in_dim = 3
    out_dim = 1

    def direction(self) -> np.ndarray:
        t1, t2 = self.theta1, self.theta2
        return np.array([np.cos(t1), np.sin(t1) * np.cos(t2), np.sin(t1) * np.sin(t2)])

    def project(self, X) -> np.ndarray:
        X = _points(X, 3)
        return (X @ self.direction())[:, None]

    def backward(self, X, dZ) -> np.ndarray:
        X = _points(X, 3)
        dZ = _sens(dZ, X.shape[0], 1)
        t1, t2 = self.theta1, self.theta2
        d1 = np.array([-np.sin(t1), np.cos(t1) * np.cos(t2), np.cos(t1) * np.sin(t2)])
        d2 = np.array([0.0, -np.sin(t1) * np.sin(t2), np.sin(t1) * np.cos(t2)])
        s = dZ[:, 0]
        return np.array([s @ (X @ d1), s @ (X @ d2)])

    def flat(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2], dtype=float)

    def with_flat(self, v) -> "Angle3D":
        v = np.asarray(v, dtype=float).reshape(-1)
        return Angle3D(float(v[0]), float(v[1]))

    def to_dict(self) -> dict:
        return {"type": self.kind, "theta": [float(self.theta1), float(self.theta2)]}


@dataclass
class Linear:
    """``x -> W^T x`` with ``W`` of shape ``(p, d)``."""

    W: np.ndarray
    kind = "linear"

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]

    def project(self, X) -> np.ndarray:
        return _points(X, self.in_dim) @ self.W

    def backward(self, X, dZ) -> np.ndarray:
        X = _points(X, self.in_dim)
        dZ = _sens(dZ, X.shape[0], self.out_dim)
        return (X.T @ dZ).reshape(-1)

    def flat(self) -> np.ndarray:
        return self.W.reshape(-1).copy()

    def with_flat(self, v) -> "Linear":
        return Linear(np.asarray(v, dtype=float).reshape(self.W.shape).copy())

    def to_dict(self) -> dict:
        return {"type": self.kind, "W": self.W.tolist()}


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a, h: 1.0 - h**2),
    "relu": (lambda a: np.maximum(a, 0.0), lambda a, h: (a > 0).astype(float)),
}


@dataclass
class Mlp:
    """Feed-forward net; ``layers`` is a list of ``(W, b)`` with ``W`` ``(in, out)``.

    Hidden layers use ``activation``; the output layer is affine.
    """

    layers: list
    activation: str = "tanh"
    kind = "mlp"

    def __post_init__(self):
        self.layers = [
            (np.atleast_2d(np.asarray(W, dtype=float)), np.asarray(b, dtype=float).reshape(-1))
            for W, b in self.layers
        ]
        if not self.layers:
            raise ReducerError("an Mlp needs at least one layer")
        for (W, b), (W_next, _) in zip(self.layers, self.layers[1:]):
            if W.shape[1] != W_next.shape[0]:
                raise ReducerError("Mlp layer shapes do not chain")
        for W, b in self.layers:
            if b.shape[0] != W.shape[1]:
                raise ReducerError("bias length must match layer width")
        if self.activation not in _ACTIVATIONS:
            raise ReducerError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [W.shape[1] for W, _ in self.layers]

    def _forward(self, X):
        act, _ = _ACTIVATIONS[self.activation]
        pre, post = [], [X]
        h = X
        for i, (W, b) in enumerate(self.layers):
            a = h @ W + b
            pre.append(a)
            h = a if i == len(self.layers) - 1 else act(a)
            post.append(h)
        return pre, post

    def project(self, X) -> np.ndarray:
        X = _points(X, self.in_dim)
        return self._forward(X)[1][-1]

    def hidden(self, X) -> np.ndarray:
        """Input to the output layer."""
        X = _points(X, self.in_dim)
        return self._forward(X)[1][-2]

    def backward(self, X, dZ) -> np.ndarray:
        X = _points(X, self.in_dim)
        dZ = _sens(dZ, X.shape[0], self.out_dim)
        _, dact = _ACTIVATIONS[self.activation]
        pre, post = self._forward(X)
        grads = []
        delta = dZ
        for i in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[i]
            grads.append(((post[i].T @ delta).reshape(-1), delta.sum(axis=0)))
            if i > 0:
                delta = (delta @ W.T) * dact(pre[i - 1], post[i])
        out = []
        for gW, gb in reversed(grads):
            out.extend([gW, gb])
        return np.concatenate(out)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.reshape(-1), b]) for W, b in self.layers])

    def with_flat(self, v) -> "Mlp":
        v = np.asarray(v, dtype=float).reshape(-1)
        if v.shape[0] != self.n_params:
            raise ReducerError(f"flat vector has {v.shape[0]} entries, expected {self.n_params}")
        layers, pos = [], 0
        for W, b in self.layers:
            nW = W.size
            layers.append((v[pos : pos + nW].reshape(W.shape).copy(), v[pos + nW : pos + nW + b.size].copy()))
            pos += nW + b.size
        return Mlp(layers, self.activation)

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in self.layers)

    def to_dict(self) -> dict:
        return {
            "type": self.kind,
            "activation": self.activation,
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in self.layers],
        }


def _sens(dZ, n: int, d: int) -> np.ndarray:
    dZ = np.asarray(dZ, dtype=float)
    if dZ.ndim == 1 and d == 1:
        dZ = dZ[:, None]
    if dZ.shape != (n, d):
        raise ReducerError(f"sensitivities have shape {dZ.shape}, expected {(n, d)}")
    return dZ


def project(theta, X) -> np.ndarray:
    return theta.project(X)


def grad_theta(theta, X, dE_dZ) -> np.ndarray:
    """Reverse-mode gradient of ``sum_i <dE_dZ_i, A_theta(x_i)>`` over flat theta."""
    return theta.backward(X, dE_dZ)


def from_dict(data: dict):
    kind = data["type"]
    if kind == "angle2d":
        return Angle2D(float(data["theta"][0]))
    if kind == "angle3d":
        return Angle3D(float(data["theta"][0]), float(data["theta"][1]))
    if kind == "linear":
        return Linear(np.asarray(data["W"], dtype=float))
    if kind == "mlp":
        return Mlp([(L["W"], L["b"]) for L in data["layers"]], data.get("activation", "tanh"))
    raise ReducerError(f"unknown reducer type {kind!r}")


def random_mlp(widths, seed: int = 0, activation: str = "tanh") -> Mlp:
    """Glorot-uniform weights and zero biases for the given layer widths."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return Mlp(layers, activation)


def init_linear_pca(X, d: int) -> Linear:
    """Top-``d`` principal directions of centered ``X`` as the columns of ``W``.

    Each direction is signed so its largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=float)
    N = X.shape[0]
    if N <= d:
        raise ReducerError("PCA initialization needs more points than output dimensions")
    Xc = X - X.mean(axis=0)
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    tol = s[0] * max(Xc.shape) * np.finfo(float).eps if s.size else 0.0
    if s.size < d or np.sum(s > tol) < d:
        raise ReducerError(f"data has fewer than {d} nonzero singular values")
    W = Vt[:d].T.copy()
    for j in range(d):
        if W[np.argmax(np.abs(W[:, j])), j] < 0:
            W[:, j] = -W[:, j]
    return Linear(W)


def pca_embedding(X, d: int) -> np.ndarray:
    """Centered data projected onto its top-``d`` principal directions."""
    X = np.asarray(X, dtype=float)
    return (X - X.mean(axis=0)) @ init_linear_pca(X, d).W


@dataclass
class EmbeddingFit:
    mlp: Mlp
    mse: float
    history: list = field(default_factory=list)


def mse_loss(mlp: Mlp, X, target) -> tuple[float, np.ndarray]:
    out = mlp.project(X)
    resid = out - target
    n = resid.size
    return float(np.sum(resid**2) / n), mlp.backward(X, 2.0 * resid / n)


def init_mlp_from_embedding(X, target, hidden=(64,), epochs: int = 500, lr: float = 0.1,
                            seed: int = 0, activation: str = "tanh") -> EmbeddingFit:
    """Fit an Mlp to reproduce ``target`` by full-batch gradient descent on MSE.

    The learning rate adapts: it grows by 5% after an accepted epoch and is
    halved (the epoch retried) whenever the loss would go up, so the recorded
    MSE never increases.
    """
    X = np.asarray(X, dtype=float)
    target = np.asarray(target, dtype=float)
    if target.ndim == 1:
        target = target[:, None]
    if target.shape[0] != X.shape[0]:
        raise ReducerError("target must have one row per sample")
    widths = [X.shape[1], *hidden, target.shape[1]]
    mlp = random_mlp(widths, seed, activation)
    loss, grad = mse_loss(mlp, X, target)
    history = [loss]
    w = mlp.flat()
    for _ in range(epochs):
        for _ in range(40):
            cand = mlp.with_flat(w - lr * grad)
            c_loss, c_grad = mse_loss(cand, X, target)
            if c_loss <= loss:
                break
            lr *= 0.5
        else:
            break
        mlp, loss, grad, w = cand, c_loss, c_grad, cand.flat()
        history.append(loss)
        lr *= 1.05
    return EmbeddingFit(mlp, loss, history)


def normalize_output_layer(theta: Mlp, X) -> Mlp:
    """Rescale the last layer so outputs over ``X`` have mean 0 and std 1."""
    if not isinstance(theta, Mlp):
        raise ReducerError("output normalization applies to Mlp reducers only")
    H = theta.hidden(X)
    W, b = theta.layers[-1]
    out = H @ W + b
    mu = out.mean(axis=0)
    sd = out.std(axis=0)
    if np.any(sd < 1e-12):
        raise DegenerateOutputError("projected outputs have (near) zero spread")
    layers = list(theta.layers[:-1]) + [(W / sd, (b - mu) / sd)]
    return Mlp(layers, theta.activation)


def load_embedding_csv(path, n_rows: int | None = None) -> np.ndarray:
    """Read an ``id,z1,...,zd`` embedding file into an ``(N, d)`` array."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id" or len(header) < 2:
            raise ReducerError(f"{path}: expected header 'id,z1,...,zd'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ReducerError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            rows.append([float(v) for v in row[1:]])
    Z = np.asarray(rows, dtype=float).reshape(-1, len(header) - 1)
    if n_rows is not None and Z.shape[0] != n_rows:
        raise ReducerError(f"{path}: {Z.shape[0]} rows but dataset has {n_rows}")
    return Z


def save_embedding_csv(path, Z) -> None:
    Z = np.asarray(Z, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"z{j + 1}" for j in range(Z.shape[1])])
        for i, row in enumerate(Z):
            w.writerow([i] + [format(float(v), ".17g") for v in row])
