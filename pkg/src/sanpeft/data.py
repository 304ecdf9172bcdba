"""Desk-scale datasets: seeded synthetic tasks plus CSV and IDX loaders."""
import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError

EVAL_FRACTION = 0.25


@dataclass
class DatasetHandle:
    x: np.ndarray
    y: np.ndarray
    classes: int
    train_idx: np.ndarray
    eval_idx: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise DataError(f"labels must lie in [0, {self.classes})")
        if np.intersect1d(self.train_idx, self.eval_idx).size:
            raise DataError("train and eval splits overlap")

    @property
    def dim(self):
        return self.x.shape[1]

    @property
    def train(self):
        return self.x[self.train_idx], self.y[self.train_idx]

    @property
    def eval(self):
        return self.x[self.eval_idx], self.y[self.eval_idx]

    def descriptor(self):
        return {"n": int(len(self.y)), "dim": int(self.dim), "classes": int(self.classes), **self.meta}


def split_indices(n, seed, eval_fraction=EVAL_FRACTION):
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    n_eval = max(1, int(round(n * eval_fraction)))
    return np.sort(perm[n_eval:]), np.sort(perm[:n_eval])


def _balanced_labels(n, classes, rng):
    y = np.arange(n) % classes
    return rng.permutation(y)


def _two_moons(n, rng, noise=0.1):
    y = _balanced_labels(n, 2, rng)
    t = rng.uniform(0.0, math.pi, size=n)
    x = np.where(y[:, None] == 0,
                 np.stack([np.cos(t), np.sin(t)], axis=1),
                 np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1))
    return x + noise * rng.standard_normal((n, 2)), y


def _gaussian_world(dim, classes, modes, separation, world_seed):
    """Mode centers in a random 2-D plane of R^dim, XOR-interleaved by class."""
    rng = np.random.default_rng([world_seed, 0xA11])
    basis, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
    k = classes * modes
    angles = 2 * math.pi * np.arange(k) / k
    centers2 = separation * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.arange(k) % classes
    return centers2 @ basis.T, labels


def _draw_shift(dim, world_seed, gamma_range, beta_scale):
    rng = np.random.default_rng([world_seed, 0x5F1])
    gamma = rng.uniform(*gamma_range, size=dim)
    beta = beta_scale * rng.standard_normal(dim)
    return gamma, beta


def _scaled_shifted_gaussians(n, rng, dim=8, classes=2, modes=2, separation=3.0, noise=1.0, world_seed=0,
                              gamma=None, beta=None, gamma_range=(0.6, 1.4), beta_scale=3.0):
    centers, center_labels = _gaussian_world(dim, classes, modes, separation, world_seed)
    y = _balanced_labels(n, classes, rng)
    mode = rng.integers(0, modes, size=n)
    idx = mode * classes + y
    assert (center_labels[idx] == y).all()
    base = centers[idx] + noise * rng.standard_normal((n, dim))
    g0, b0 = _draw_shift(dim, world_seed, gamma_range, beta_scale)
    gamma = g0 if gamma is None else np.broadcast_to(np.asarray(gamma, dtype=np.float64), (dim,))
    beta = b0 if beta is None else np.broadcast_to(np.asarray(beta, dtype=np.float64), (dim,))
    meta = {"gamma_star": [float(v) for v in gamma], "beta_star": [float(v) for v in beta]}
    return base * gamma + beta, y, meta


def _patch_grid(n, rng, grid=2, patch_dim=8, classes=3, noise=0.5, world_seed=0):
    """Each class is a fixed pattern placed on one class-specific patch."""
    w = np.random.default_rng([world_seed, 0x9A7])
    patterns = w.standard_normal((classes, patch_dim)) * 2.0
    cells = grid * grid
    where = np.arange(classes) % cells
    y = _balanced_labels(n, classes, rng)
    x = noise * rng.standard_normal((n, cells, patch_dim))
    x[np.arange(n), where[y]] += patterns[y]
    return x.reshape(n, cells * patch_dim), y


TASKS = ("two_moons", "scaled_shifted_gaussians", "patch_grid")


def gen_synthetic(task, n, seed, **kw):
    """Deterministic synthetic dataset (no feature normalization is applied)."""
    if task not in TASKS:
        raise ConfigError(f"unknown synthetic task {task!r}; expected one of {', '.join(TASKS)}")
    classes = int(kw.get("classes", 2 if task != "patch_grid" else 3))
    if n < 2 * classes:
        raise ConfigError(f"need n >= 2 * classes ({2 * classes}), got {n}")
    rng = np.random.default_rng(seed)
    meta = {"task": task, "seed": int(seed)}
    if task == "two_moons":
        if classes != 2:
            raise ConfigError("two_moons has exactly 2 classes")
        x, y = _two_moons(n, rng, noise=kw.get("noise", 0.1))
    elif task == "scaled_shifted_gaussians":
        x, y, extra = _scaled_shifted_gaussians(n, rng, **kw)
        meta.update(extra)
    else:
        x, y = _patch_grid(n, rng, **kw)
    train_idx, eval_idx = split_indices(n, seed)
    dim = x.shape[1]
    return DatasetHandle(
        x=np.ascontiguousarray(x, dtype=np.float64),
        y=y.astype(np.int64),
        classes=classes,
        train_idx=train_idx,
        eval_idx=eval_idx,
        mean=np.zeros(dim),
        std=np.ones(dim),
        meta=meta,
    )


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_csv(path, ds):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(ds.dim)])
        for label, row in zip(ds.y, ds.x):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "label" or any(h != f"f{i}" for i, h in enumerate(header[1:])):
        raise FormatError(f"{path}:1: header must be label,f0,f1,...")
    dim = len(header) - 1
    xs, ys = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != dim + 1:
            raise FormatError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(row)}")
        try:
            ys.append(int(row[0]))
            xs.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not ys:
        raise FormatError(f"{path}: no data rows")
    x = np.asarray(xs, dtype=np.float64)
    if not np.isfinite(x).all():
        raise FormatError(f"{path}: non-finite feature value")
    return x, np.asarray(ys, dtype=np.int64)


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: byte 0: truncated magic number")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES:
        raise FormatError(f"{path}: byte 0: bad magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: byte 4: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dt = np.dtype(_IDX_TYPES[code])
    need = int(np.prod(dims)) * dt.itemsize
    if len(raw) - header_end != need:
        raise FormatError(f"{path}: byte {header_end}: expected {need} data bytes, found {len(raw) - header_end}")
    return np.frombuffer(raw, dtype=dt, offset=header_end).reshape(dims)


def write_idx(path, arr):
    arr = np.asarray(arr)
    code = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"dtype {arr.dtype} has no IDX type code")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, code, arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(np.dtype(_IDX_TYPES[code])).tobytes())


def _normalize(x, train_idx):
    mean = x[train_idx].mean(axis=0)
    std = x[train_idx].std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (x - mean) / std, mean, std


def load_dataset(path, format="csv_labeled", labels_path=None, classes=None, seed=0):
    """Load a labeled dataset and standardize features with train-split statistics."""
    if format == "csv_labeled":
        x, y = _read_csv(path)
    elif format == "idx_images":
        images = read_idx(path)
        if labels_path is None:
            raise ConfigError("idx_images needs labels_path")
        y = read_idx(labels_path).astype(np.int64).reshape(-1)
        if images.shape[0] != y.shape[0]:
            raise DataError(f"{len(y)} labels for {images.shape[0]} images")
        x = images.reshape(images.shape[0], -1).astype(np.float64)
    else:
        raise ConfigError(f"unknown dataset format {format!r}")
    if y.min() < 0:
        raise DataError(f"{path}: negative label {int(y.min())}")
    k = int(y.max()) + 1 if classes is None else int(classes)
    if y.max() >= k:
        raise DataError(f"{path}: label {int(y.max())} outside [0, {k})")
    train_idx, eval_idx = split_indices(len(y), seed)
    xn, mean, std = _normalize(x, train_idx)
    meta = {"source": str(path), "format": format, "seed": int(seed)}
    if format == "idx_images":
        meta["image_shape"] = list(images.shape[1:])
    return DatasetHandle(xn, y, k, train_idx, eval_idx, mean, std, meta)
