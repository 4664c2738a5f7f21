"""Synthetic datasets, class-imbalance subsampling, trigger embedding and data I/O."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray               # (N, *input_shape), values in [0, 1]
    y: np.ndarray               # (N,) int class indices
    num_classes: int
    poisoned: Optional[np.ndarray] = None   # (N,) bool provenance flags

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} samples but {y.shape[0]} labels")
        if X.size and (X.min() < 0.0 or X.max() > 1.0):
            raise ValueError("samples must lie in [0, 1]")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        flags = np.zeros(len(y), bool) if self.poisoned is None else np.asarray(self.poisoned, bool)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "poisoned", flags)

    def __len__(self):
        return len(self.y)

    @property
    def input_shape(self) -> tuple:
        return self.X.shape[1:]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.X[idx], self.y[idx], self.num_classes, self.poisoned[idx])

    def of_class(self, c: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.y == c))


class CleanSet(Dataset):
    """Small balanced set: the only data the mitigation procedures may touch."""

    def __post_init__(self):
        super().__post_init__()
        counts = self.class_counts
        if len(self.y) == 0 or counts.min() != counts.max():
            raise ValueError(f"clean set must be balanced and nonempty, got counts {counts.tolist()}")
        if self.poisoned.any():
            raise ValueError("clean set may not hold poisoned samples")

    @property
    def per_class(self) -> int:
        return int(self.class_counts[0])


def concat(a: Dataset, b: Dataset) -> Dataset:
    return Dataset(np.concatenate([a.X, b.X]), np.concatenate([a.y, b.y]), a.num_classes,
                   np.concatenate([a.poisoned, b.poisoned]))


# ---------------------------------------------------------------------------
# synthetic classes
# ---------------------------------------------------------------------------

def _smooth(arr: np.ndarray, shape: tuple, sigma: float) -> np.ndarray:
    # smooth over the spatial axes only (the last axis of a vector, H and W of an image)
    field_shape = arr.shape[:-len(shape)]
    if len(shape) == 1:
        s = (0,) * len(field_shape) + (sigma,)
    else:
        s = (0,) * len(field_shape) + (0, sigma, sigma)
    out = gaussian_filter(arr, sigma=s, mode="wrap")
    # renormalize to unit RMS per field
    axes = tuple(range(len(field_shape), arr.ndim))
    return out / np.sqrt((out ** 2).mean(axis=axes, keepdims=True))


def synth_classes(num_classes: int = 10, shape=(64,), separation: float = 1.0, n_per_class=500,
                  seed: int = 0, modes: int = 2, noise: float = 1.0, smoothness: float = 2.0,
                  white: float = 0.02, prototypes_seed: Optional[int] = None) -> Dataset:
    """Class-conditional mixture of smooth prototypes with smooth Gaussian noise.

    Each class owns ``modes`` smooth prototype signals.  A sample is
    ``0.5 + 0.1 * (separation * prototype + noise * smooth_noise) + white * N(0, 1)``,
    clipped into [0, 1].  ``separation / noise`` controls the Bayes overlap.
    Prototypes are drawn from ``prototypes_seed`` (defaults to ``seed``) so that a
    train and a test split can share class identities but not samples.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    counts = np.broadcast_to(np.asarray(n_per_class, dtype=np.int64), (num_classes,))
    prng = np.random.default_rng(seed if prototypes_seed is None else prototypes_seed)
    protos = _smooth(prng.normal(size=(num_classes, modes) + shape), shape, smoothness)
    rng = np.random.default_rng([seed, 7919])
    X, y = [], []
    for c in range(num_classes):
        n = int(counts[c])
        m = rng.integers(0, modes, size=n)
        z = _smooth(rng.normal(size=(n,) + shape), shape, smoothness)
        x = 0.5 + 0.1 * (separation * protos[c, m] + noise * z) + white * rng.normal(size=(n,) + shape)
        X.append(np.clip(x, 0.0, 1.0))
        y.append(np.full(n, c))
    return Dataset(np.concatenate(X), np.concatenate(y), num_classes)


# ---------------------------------------------------------------------------
# class imbalance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImbalanceSpec:
    kind: str = "LT"            # "LT" (exponential) or "step"
    gamma: float = 100.0
    n0: int = 500

    def __post_init__(self):
        if self.kind not in ("LT", "step"):
            raise ValueError(f"unknown imbalance kind {self.kind!r}")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")

    def mu_e(self, num_classes: int) -> float:
        return self.gamma ** (-1.0 / (num_classes - 1))

    @property
    def mu_s(self) -> float:
        return 1.0 / self.gamma

    def counts(self, num_classes: int) -> np.ndarray:
        n0 = self.n0
        if self.kind == "LT":
            mu = self.mu_e(num_classes)
            n = [math.floor(n0 * mu ** i + 0.5) for i in range(num_classes)]
        else:
            n = [n0 if i < num_classes / 2 else math.floor(self.mu_s * n0 + 0.5) for i in range(num_classes)]
        n[-1] = math.floor(n0 / self.gamma + 0.5)
        return np.asarray(n, dtype=np.int64)


def apply_imbalance(ds: Dataset, spec: ImbalanceSpec, seed: int = 0) -> Dataset:
    """Keep ``n_i`` samples of class ``i`` (drawn without replacement, original order kept)."""
    want = spec.counts(ds.num_classes)
    have = ds.class_counts
    if np.any(want > have):
        bad = int(np.argmax(want > have))
        raise ValueError(f"class {bad} needs {want[bad]} samples, only {have[bad]} available")
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.y == c)
        keep.append(rng.choice(idx, size=want[c], replace=False))
    return ds.subset(np.sort(np.concatenate(keep)))


# ---------------------------------------------------------------------------
# triggers and poisoning
# ---------------------------------------------------------------------------

TRIGGER_KINDS = ("additive_global", "patch_replace", "patch_blend")


@dataclass(frozen=True)
class TriggerSpec:
    kind: str
    pattern: np.ndarray          # additive: delta over the full input; patch: values where mask is set
    target: int
    mask: Optional[np.ndarray] = None
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        object.__setattr__(self, "pattern", np.asarray(self.pattern, dtype=np.float64))
        if self.kind != "additive_global":
            if self.mask is None:
                raise ValueError("patch triggers need a mask")
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != self.pattern.shape:
                raise ValueError(f"mask shape {mask.shape} != pattern shape {self.pattern.shape}")
            object.__setattr__(self, "mask", mask)
        if self.kind == "patch_blend" and not 0 < self.alpha <= 1:
            raise ValueError("blend alpha must lie in (0, 1]")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.pattern))


def chessboard_trigger(shape, amplitude: float = 0.03, target: int = 0) -> TriggerSpec:
    """Additive +/- amplitude checkerboard over the whole input."""
    shape = tuple(np.atleast_1d(shape))
    if len(shape) == 1:
        sign = (-1.0) ** np.arange(shape[0])
    else:
        ii, jj = np.indices(shape[-2:])
        sign = np.broadcast_to((-1.0) ** (ii + jj), shape)
    return TriggerSpec("additive_global", amplitude * sign, target)


def patch_trigger(shape, size: int = 3, position=(0, 0), target: int = 0, blend: Optional[float] = None,
                  seed: int = 0) -> TriggerSpec:
    """A ``size``-wide binary patch at ``position`` (images: (row, col); vectors: start index)."""
    shape = tuple(np.atleast_1d(shape))
    mask = np.zeros(shape, bool)
    rng = np.random.default_rng(seed)
    if len(shape) == 1:
        (p,) = np.atleast_1d(position)[:1]
        if p < 0 or p + size > shape[0]:
            raise ValueError(f"patch [{p}, {p + size}) outside input of length {shape[0]}")
        mask[p:p + size] = True
    else:
        r, c = position
        if r < 0 or c < 0 or r + size > shape[-2] or c + size > shape[-1]:
            raise ValueError(f"patch at {position} of size {size} outside {shape[-2:]}")
        mask[..., r:r + size, c:c + size] = True
    pattern = np.where(mask, rng.integers(0, 2, size=shape).astype(float), 0.0)
    if blend is None:
        return TriggerSpec("patch_replace", pattern, target, mask)
    return TriggerSpec("patch_blend", pattern, target, mask, alpha=blend)


def embed_trigger(x: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Embed the trigger into one sample or a batch; output stays in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-spec.pattern.ndim:] != spec.pattern.shape:
        raise ValueError(f"trigger geometry {spec.pattern.shape} does not fit input {x.shape}")
    if spec.kind == "additive_global":
        out = x + spec.pattern
    elif spec.kind == "patch_replace":
        out = np.where(spec.mask, spec.pattern, x)
    else:
        out = np.where(spec.mask, (1 - spec.alpha) * x + spec.alpha * spec.pattern, x)
    return np.clip(out, 0.0, 1.0)


def poison(ds: Dataset, spec: TriggerSpec, rate: float = 0.02, seed: int = 0) -> Dataset:
    """Trigger and relabel a ``rate`` fraction of the non-target samples (in place of the originals)."""
    if not 0 < rate < 1:
        raise ValueError("poisoning rate must lie in (0, 1)")
    eligible = np.flatnonzero(ds.y != spec.target)
    n = math.floor(rate * len(eligible) + 0.5)
    if n == 0:
        raise ValueError(f"rate {rate} poisons zero of {len(eligible)} eligible samples")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(eligible, size=n, replace=False))
    X, y, flags = ds.X.copy(), ds.y.copy(), ds.poisoned.copy()
    X[chosen] = embed_trigger(X[chosen], spec)
    y[chosen] = spec.target
    flags[chosen] = True
    return Dataset(X, y, ds.num_classes, flags)


def split_clean_set(ds: Dataset, per_class: int = 50, seed: int = 0) -> tuple[CleanSet, Dataset]:
    """Draw a balanced clean set and return it together with the remaining pool."""
    rng = np.random.default_rng(seed)
    take = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero((ds.y == c) & ~ds.poisoned)
        if len(idx) < per_class:
            raise ValueError(f"class {c} has {len(idx)} clean samples, {per_class} requested")
        take.append(np.sort(rng.choice(idx, size=per_class, replace=False)))
    take = np.concatenate(take)
    rest = np.setdiff1d(np.arange(len(ds)), take)
    part = ds.subset(take)
    return CleanSet(part.X, part.y, ds.num_classes), ds.subset(rest)


# ---------------------------------------------------------------------------
# external data
# ---------------------------------------------------------------------------

RAW_MAGIC = b"MMDATA"
RAW_VERSION = 1


def save_csv(ds: Dataset, path) -> None:
    d = int(np.prod(ds.input_shape))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(d)])
        for x, y in zip(ds.X.reshape(len(ds), -1), ds.y):
            w.writerow([int(y)] + [repr(float(v)) for v in x])


def save_raw(ds: Dataset, path) -> None:
    """``MMDATA`` u8 version, u32 N, u32 num_classes, u8 rank, u32*rank shape, i64 labels, f64 samples."""
    shape = ds.input_shape
    head = RAW_MAGIC + struct.pack("<BIIB", RAW_VERSION, len(ds), ds.num_classes, len(shape))
    head += struct.pack(f"<{len(shape)}I", *shape)
    Path(path).write_bytes(head + ds.y.astype("<i8").tobytes() + ds.X.astype("<f8").tobytes())


def _scale_unit(X: np.ndarray) -> np.ndarray:
    lo, hi = X.min(), X.max()
    if lo >= 0.0 and hi <= 1.0:
        return X
    if hi == lo:
        return np.zeros_like(X)
    return (X - lo) / (hi - lo)


def load_external(path, format: Optional[str] = None, num_classes: Optional[int] = None,
                  shape: Optional[Sequence[int]] = None) -> Dataset:
    """Read a labelled CSV (``label,f0,...``) or raw ``MMDATA`` file.

    Values already inside [0, 1] are kept bit-exact; anything else is min-max scaled.
    """
    path = Path(path)
    format = format or ("raw" if path.suffix in (".bin", ".raw", ".mmdata") else "csv")
    if format == "raw":
        buf = path.read_bytes()
        if buf[:6] != RAW_MAGIC:
            raise ValueError(f"{path}: not an MMDATA file")
        try:
            version, n, k, rank = struct.unpack_from("<BIIB", buf, 6)
            if version != RAW_VERSION:
                raise ValueError(f"{path}: MMDATA version {version}, expected {RAW_VERSION}")
            off = 6 + struct.calcsize("<BIIB")
            dims = struct.unpack_from(f"<{rank}I", buf, off)
        except struct.error:
            raise ValueError(f"{path}: truncated MMDATA header") from None
        off += 4 * rank
        d = int(np.prod(dims))
        if len(buf) != off + 8 * n + 8 * n * d:
            raise ValueError(f"{path}: MMDATA payload size mismatch")
        y = np.frombuffer(buf, "<i8", n, off).astype(np.int64)
        X = np.frombuffer(buf, "<f8", n * d, off + 8 * n).astype(np.float64).reshape((n,) + tuple(dims))
        if num_classes is not None:
            k = num_classes
        if y.size and (y.min() < 0 or y.max() >= k):
            raise ValueError(f"{path}: label outside [0, {k})")
        return Dataset(_scale_unit(X), y, k)
    if format != "csv":
        raise ValueError(f"unknown format {format!r}")
    labels, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise ValueError(f"{path}: expected header 'label,f0,...'")
        d = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise ValueError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed row") from None
    y = np.asarray(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"{path}: label outside [0, {k})")
    X = np.asarray(rows, dtype=np.float64).reshape(len(rows), d)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{path}: non-finite feature value")
    if shape is not None:
        X = X.reshape((len(rows),) + tuple(shape))
    return Dataset(_scale_unit(X), y, k)
