"""Synthetic datasets, MNIST IDX ingestion, and dataset CSV interchange.

Random draws use numpy's PCG64 bit generator. A ``SeedSequence`` built from
the user seed is spawned into independent child streams: stream 0 picks
components (or x positions), stream ``1 + k`` draws the noise of component
``k``. Outputs are therefore fixed functions of ``(spec, seed)``.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.X.shape[1] < 1:
            raise ValueError("X must be an (N, p) array with p >= 1")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
            if self.labels.shape != (self.X.shape[0],):
                raise ValueError("labels must have one entry per row of X")

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


@dataclass
class GmmSpec:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    n: int
    seed: int = 0
    name: str = "gmm"

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)

    def validate(self) -> None:
        K, p = self.means.shape
        if self.variances.shape != (K, p):
            raise ValueError("variances must have the same shape as means")
        if self.weights.shape != (K,):
            raise ValueError("need one weight per component")
        if np.any(self.variances <= 0):
            raise ValueError("covariance diagonals must be positive")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if self.n < 0:
            raise ValueError("n must be >= 0")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "weights": self.weights.tolist(),
            "n": int(self.n),
            "seed": int(self.seed),
        }


PRESETS = {
    "paper2d": dict(means=[[0.0, 0.0], [-3.0, -5.0]], variances=[[2.0, 2.0], [1.0, 1.0]],
                    weights=[0.5, 0.5]),
    "paper3d": dict(means=[[0.0, 0.0, 0.0], [-3.0, -5.0, 10.0]],
                    variances=[[2.0, 2.0, 2.0], [1.0, 1.0, 1.0]], weights=[0.5, 0.5]),
}


def preset(name: str, n: int = 2000, seed: int = 0) -> GmmSpec:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return GmmSpec(n=n, seed=seed, name=name, **PRESETS[name])


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def gen_gmm(spec: GmmSpec) -> Dataset:
    """Draw ``spec.n`` labeled points from a diagonal Gaussian mixture."""
    spec.validate()
    K, p = spec.means.shape
    streams = _streams(spec.seed, K + 1)
    comp = streams[0].choice(K, size=spec.n, p=spec.weights)
    X = np.empty((spec.n, p))
    for k in range(K):
        idx = np.nonzero(comp == k)[0]
        noise = streams[1 + k].standard_normal((idx.size, p))
        X[idx] = spec.means[k] + noise * np.sqrt(spec.variances[k])
    return Dataset(X, comp, {"generator": "gmm", **spec.to_dict()})


def gen_noisy_lines(slope: float = 1.0, intercepts=(0.0, 4.0), n_per_line: int = 500,
                    eps: float = 0.5, seed: int = 0, x_range=(0.0, 10.0)) -> Dataset:
    """Two parallel lines ``y = slope x + c`` with Gaussian noise (std ``eps``) on ``y``."""
    c0, c1 = intercepts
    if c0 == c1:
        raise ValueError("intercepts must differ")
    if eps <= 0:
        raise ValueError("eps must be positive")
    streams = _streams(seed, 3)
    lo, hi = x_range
    parts, labels = [], []
    for line, c in enumerate((c0, c1)):
        x = streams[0].uniform(lo, hi, size=n_per_line)
        y = slope * x + c + eps * streams[1 + line].standard_normal(n_per_line)
        parts.append(np.column_stack([x, y]))
        labels.append(np.full(n_per_line, line))
    X = np.vstack(parts) if n_per_line else np.empty((0, 2))
    meta = {
        "generator": "noisy_lines", "slope": slope, "intercepts": [c0, c1],
        "n_per_line": n_per_line, "eps": eps, "seed": seed, "x_range": list(x_range),
    }
    return Dataset(X, np.concatenate(labels).astype(int), meta)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DataFormatError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _idx_header(raw: bytes, path, magic: int, ndim: int):
    need = 4 + 4 * ndim
    if len(raw) < 4:
        raise DataFormatError(f"{path}: file ends at byte {len(raw)} before the magic number")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DataFormatError(f"{path}: bad magic 0x{got:08x} at byte offset 0, expected 0x{magic:08x}")
    if len(raw) < need:
        raise DataFormatError(f"{path}: header truncated at byte {len(raw)}, need {need}")
    return struct.unpack(f">{ndim}I", raw[4:need]), need


def read_idx_images(path) -> np.ndarray:
    raw = _read_bytes(path)
    (n, rows, cols), off = _idx_header(raw, path, IDX_IMAGES_MAGIC, 3)
    expected = off + n * rows * cols
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: pixel data ends at byte offset {len(raw)}, expected {expected} "
            f"for {n} images of {rows}x{cols}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=off).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    (n,), off = _idx_header(raw, path, IDX_LABELS_MAGIC, 1)
    if len(raw) != off + n:
        raise DataFormatError(
            f"{path}: label data ends at byte offset {len(raw)}, expected {off + n} for {n} labels"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=off)


def write_idx(images_path, labels_path, images, labels) -> None:
    """Write uint8 images ``(N, rows, cols)`` and labels as an IDX pair (gzip if ``.gz``)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    img = struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes()
    lab = struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes()
    for path, data in ((images_path, img), (labels_path, lab)):
        if str(path).endswith(".gz"):
            # mtime=0 keeps the archive byte-stable
            data = gzip.compress(data, mtime=0)
        Path(path).write_bytes(data)


def load_idx(images_path, labels_path, digit_filter=None, limit: int | None = None,
             per_digit: int | None = None) -> Dataset:
    """Load an MNIST-style IDX pair as ``(N, rows*cols)`` pixels scaled to [0, 1].

    Rows keep file order. ``digit_filter`` keeps only the listed labels,
    ``per_digit`` keeps the first that many of each label, and ``limit``
    truncates the result.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels"
        )
    keep = np.ones(labels.shape[0], dtype=bool)
    if digit_filter is not None:
        keep &= np.isin(labels, sorted(digit_filter))
    if per_digit is not None:
        seen: dict[int, int] = {}
        for i in np.nonzero(keep)[0]:
            c = seen.get(int(labels[i]), 0)
            keep[i] = c < per_digit
            seen[int(labels[i])] = c + 1
    idx = np.nonzero(keep)[0]
    if limit is not None:
        idx = idx[:limit]
    n_pix = images.shape[1] * images.shape[2]
    X = images[idx].reshape(idx.size, n_pix).astype(float) / 255.0
    meta = {
        "generator": "idx", "images": str(images_path), "labels": str(labels_path),
        "digit_filter": None if digit_filter is None else sorted(int(d) for d in digit_filter),
        "limit": limit, "per_digit": per_digit,
    }
    return Dataset(X.reshape(idx.size, n_pix), labels[idx].astype(int), meta)


def save_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", *(f"x{j + 1}" for j in range(ds.dim))])
        for i, row in enumerate(ds.X):
            lab = "-" if ds.labels is None else str(int(ds.labels[i]))
            w.writerow([lab, *(format(float(v), ".17g") for v in row)])


def load_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label" or len(header) < 2:
            raise DataFormatError(f"{path}:1: expected header 'label,x1,...,xp'")
        p = len(header) - 1
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != p + 1:
                raise DataFormatError(f"{path}:{lineno}: expected {p + 1} columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row[1:]])
                labels.append(None if row[0] == "-" else int(row[0]))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
    has = [lab is not None for lab in labels]
    if any(has) and not all(has):
        raise DataFormatError(f"{path}: label column mixes values and '-'")
    X = np.asarray(rows, dtype=float).reshape(len(rows), p)
    lab = np.asarray(labels, dtype=int) if labels and all(has) else None
    return Dataset(X, lab, {"source": str(path)})
