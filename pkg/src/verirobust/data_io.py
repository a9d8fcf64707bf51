"""Datasets: MNIST IDX files, seeded synthetic generators, normalization."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numerics import F32, F64, make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_MEAN = 0.5
MNIST_STD = 1.0


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class InputDomain:
    """Valid input range in network (normalized) coordinates.

    ``scale`` is the normalization std: a perturbation budget eps given in the
    original [0, 1] pixel scale becomes a radius eps / scale internally.
    """

    lo: np.ndarray | float = 0.0
    hi: np.ndarray | float = 1.0
    scale: np.ndarray | float = 1.0

    def radius(self, eps: float):
        return np.asarray(eps, dtype=F64) / np.asarray(self.scale, dtype=F64)

    def clip(self, x):
        return np.clip(x, self.lo, self.hi).astype(F32)


UNIT_DOMAIN = InputDomain()


@dataclass
class Dataset:
    X: np.ndarray            # (n, d) float32, already normalized
    y: np.ndarray            # (n,) int64
    num_classes: int
    mean: np.ndarray | float = 0.0
    std: np.ndarray | float = 1.0
    provenance: str = ""

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=F32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValueError(f"inconsistent dataset shapes {self.X.shape} / {self.y.shape}")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def domain(self) -> InputDomain:
        mean = np.asarray(self.mean, dtype=F64)
        std = np.asarray(self.std, dtype=F64)
        return InputDomain(lo=((0.0 - mean) / std).astype(F32),
                           hi=((1.0 - mean) / std).astype(F32),
                           scale=std)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], y=self.y[idx])

    def split(self, n_first: int, n_second: int | None = None, seed: int = 0):
        perm = make_rng(seed).permutation(len(self))
        end = len(self) if n_second is None else n_first + n_second
        return self.subset(perm[:n_first]), self.subset(perm[n_first:end])


def normalize(ds: Dataset, mean, std) -> Dataset:
    """x' = (x - mean) / std, applied on top of the raw [0, 1] data."""
    std_a = np.asarray(std, dtype=F64)
    if np.any(std_a <= 0):
        raise ValueError("normalization std must be positive")
    raw = denormalize(ds)
    X = ((raw.X.astype(F64) - mean) / std_a).astype(F32)
    return replace(ds, X=X, mean=mean, std=std)


def denormalize(ds: Dataset) -> Dataset:
    X = (ds.X.astype(F64) * np.asarray(ds.std, F64) + np.asarray(ds.mean, F64)).astype(F32)
    return replace(ds, X=X, mean=0.0, std=1.0)


# -- IDX ----------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(data: bytes, magic: int, what: str) -> np.ndarray:
    if len(data) < 8:
        raise IdxFormatError(f"{what}: truncated header")
    got = struct.unpack(">I", data[:4])[0]
    if got != magic:
        raise IdxFormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise IdxFormatError(f"{what}: truncated payload ({len(data) - header} of {size} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    if len(images) != len(labels):
        raise IdxFormatError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    X = images.reshape(len(images), -1).astype(F32) / F32(255.0)
    return Dataset(X, labels.astype(np.int64), num_classes, provenance=f"idx:{images_path}")


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    head = struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *images.shape)
    Path(images_path).write_bytes(head + images.tobytes())
    head = struct.pack(">I", IDX_LABELS_MAGIC) + struct.pack(">I", len(labels))
    Path(labels_path).write_bytes(head + labels.tobytes())


# -- synthetic ------------------------------------------------------------------------

MOONS_SCALE = 1.0 / 3.0


def moons_curves(t):
    """Noise-free moon curves in [0,1]^2: circles of radius 1/3 (class 0 upper, 1 lower)."""
    upper = np.stack([np.cos(t), np.sin(t)], axis=-1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=-1)
    shift = np.array([1.0, 0.5])
    return (upper + shift) * MOONS_SCALE, (lower + shift) * MOONS_SCALE


def synth_moons(n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    if n < 2:
        raise ValueError("need n >= 2")
    rng = make_rng(seed)
    n0 = n // 2
    t = rng.uniform(0.0, np.pi, size=n)
    upper, lower = moons_curves(t)
    X = np.where((np.arange(n) < n0)[:, None], upper, lower)
    y = (np.arange(n) >= n0).astype(np.int64)
    X = X + noise * MOONS_SCALE * rng.standard_normal((n, 2))
    perm = rng.permutation(n)
    X = np.clip(X[perm], 0.0, 1.0)
    return Dataset(X.astype(F32), y[perm], 2, provenance=f"moons:n={n},noise={noise},seed={seed}")


def blob_centers(k: int) -> np.ndarray:
    ang = 2 * np.pi * np.arange(k) / k
    return 0.5 + 0.3 * np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def synth_blobs(n: int, k: int = 3, spread: float = 0.05, seed: int = 0) -> Dataset:
    if n < 2:
        raise ValueError("need n >= 2")
    rng = make_rng(seed)
    y = rng.integers(0, k, size=n)
    X = blob_centers(k)[y] + spread * rng.standard_normal((n, 2))
    X = np.clip(X, 0.0, 1.0)
    return Dataset(X.astype(F32), y, k, provenance=f"blobs:n={n},k={k},spread={spread},seed={seed}")


# -- CSV ----------------------------------------------------------------------------------

def to_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(ds.dim)] + ["label"])
        for x, y in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def from_csv(path, num_classes: int | None = None) -> Dataset:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    y = rows[:, -1].astype(np.int64)
    k = num_classes or max(2, int(y.max()) + 1)
    return Dataset(rows[:, :-1].astype(F32), y, k, provenance=f"csv:{path}")
