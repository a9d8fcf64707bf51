"""Float32 storage, seeded RNG and outward-rounded interval arithmetic.

Every interval endpoint produced here is a float32 that encloses the exact
real-arithmetic result.  Scalar ops round to nearest in float32 and then step
one ulp outward; array helpers accumulate in float64 with an explicit error
bound and round the final endpoint outward to float32.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

F32 = np.float32
F64 = np.float64

_U64 = 2.0 ** -53


class DimensionError(ValueError):
    """Raised when array shapes do not chain."""


class NonFiniteError(ValueError):
    """Raised when NaN or Inf is passed to a checked constructor."""


def vec32(values) -> np.ndarray:
    v = np.array(values, dtype=F32).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("vector contains NaN or Inf")
    return v


def mat32(values) -> np.ndarray:
    m = np.array(values, dtype=F32)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("matrix contains NaN or Inf")
    return np.ascontiguousarray(m)


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [make_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# -- directed rounding helpers -------------------------------------------------

def step_down(x):
    return np.nextafter(np.asarray(x, dtype=F32), F32(-np.inf))


def step_up(x):
    return np.nextafter(np.asarray(x, dtype=F32), F32(np.inf))


def round_down32(x64) -> np.ndarray:
    """Largest float32 <= x64 (elementwise)."""
    x64 = np.asarray(x64, dtype=F64)
    f = x64.astype(F32)
    return np.where(f.astype(F64) > x64, np.nextafter(f, F32(-np.inf)), f)


def round_up32(x64) -> np.ndarray:
    """Smallest float32 >= x64 (elementwise)."""
    x64 = np.asarray(x64, dtype=F64)
    f = x64.astype(F32)
    return np.where(f.astype(F64) < x64, np.nextafter(f, F32(np.inf)), f)


def gamma(n: int) -> float:
    """Relative error bound for an n-term float64 sum of exact products.

    Padded by one extra unit so that evaluating the bound itself in floating
    point cannot undershoot.
    """
    nu = (n + 2) * _U64
    return nu / (1.0 - nu)


def sum_error(n_terms: int, abs_sum64):
    """Upper bound on |computed - exact| for a float64 sum with magnitude abs_sum64."""
    return gamma(n_terms) * np.asarray(abs_sum64, dtype=F64) * (1.0 + 4 * _U64)


def widen64(lo64, hi64, err64):
    """Subtract/add an error bound and step one float64 ulp outward."""
    lo = np.nextafter(np.asarray(lo64, F64) - err64, -np.inf)
    hi = np.nextafter(np.asarray(hi64, F64) + err64, np.inf)
    return lo, hi


# -- scalar intervals ------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    overflow: bool = False

    def __post_init__(self):
        lo, hi = F32(self.lo), F32(self.hi)
        if np.isnan(lo) or np.isnan(hi):
            raise NonFiniteError("interval endpoint is NaN")
        if lo > hi:
            raise ValueError(f"empty interval [{lo}, {hi}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def point(cls, x: float) -> "Interval":
        return cls(x, x)

    @property
    def width(self) -> float:
        return float(self.hi) - float(self.lo)

    def contains(self, x: float) -> bool:
        return bool(self.lo <= x <= self.hi)

    def __add__(self, other):
        if not isinstance(other, Interval):
            other = Interval.point(other)
        return interval_add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Interval):
            return interval_mul(self, other)
        return interval_mul_scalar(self, other)

    __rmul__ = __mul__

    def relu(self) -> "Interval":
        return interval_relu(self)


def _outward(lo, hi, *operands: Interval) -> Interval:
    with np.errstate(over="ignore", invalid="ignore"):
        lo32, hi32 = step_down(lo), step_up(hi)
    flag = any(op.overflow for op in operands)
    if np.isinf(lo32) or np.isinf(hi32):
        finite_in = all(np.isfinite(op.lo) and np.isfinite(op.hi) for op in operands)
        flag = flag or finite_in
    return Interval(lo32, hi32, flag)


def interval_add(a: Interval, b: Interval) -> Interval:
    with np.errstate(over="ignore"):
        lo = F32(a.lo) + F32(b.lo)
        hi = F32(a.hi) + F32(b.hi)
    return _outward(lo, hi, a, b)


def interval_mul_scalar(a: Interval, c: float) -> Interval:
    c = F32(c)
    with np.errstate(over="ignore"):
        p, q = F32(a.lo) * c, F32(a.hi) * c
    # c < 0 swaps the endpoints
    return _outward(min(p, q), max(p, q), a)


def interval_mul(a: Interval, b: Interval) -> Interval:
    with np.errstate(over="ignore", invalid="ignore"):
        ps = [F32(x) * F32(y) for x in (a.lo, a.hi) for y in (b.lo, b.hi)]
    ps = [F32(0.0) if np.isnan(p) else p for p in ps]  # 0 * inf
    return _outward(min(ps), max(ps), a, b)


def interval_relu(a: Interval) -> Interval:
    # max(., 0) is exact, no rounding step needed
    return Interval(max(a.lo, F32(0.0)), max(a.hi, F32(0.0)), a.overflow)


# -- vector intervals ---------------------------------------------------------------

def matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Plain float32 product with float64 accumulation."""
    M, v = np.asarray(M), np.asarray(v)
    if M.ndim != 2 or v.shape[-1] != M.shape[1]:
        raise DimensionError(f"cannot multiply {M.shape} by {v.shape}")
    return (M.astype(F64) @ v.astype(F64)).astype(F32)


def interval_matvec(M: np.ndarray, lo: np.ndarray, hi: np.ndarray, bias=None):
    """Enclosure of {M x + bias : lo <= x <= hi} as float32 (lo, hi) arrays."""
    M = np.asarray(M, dtype=F32)
    lo = np.asarray(lo, dtype=F32)
    hi = np.asarray(hi, dtype=F32)
    if M.ndim != 2 or lo.shape != (M.shape[1],) or hi.shape != lo.shape:
        raise DimensionError(f"cannot multiply {M.shape} by interval of shape {lo.shape}")
    Mp = np.maximum(M, 0).astype(F64)
    Mn = np.minimum(M, 0).astype(F64)
    lo64, hi64 = lo.astype(F64), hi.astype(F64)
    low = Mp @ lo64 + Mn @ hi64
    up = Mp @ hi64 + Mn @ lo64
    mag = np.abs(M).astype(F64) @ np.maximum(np.abs(lo64), np.abs(hi64))
    n_terms = M.shape[1]
    if bias is not None:
        b = np.asarray(bias, dtype=F64)
        low, up, mag = low + b, up + b, mag + np.abs(b)
        n_terms += 1
    err = sum_error(n_terms, mag)
    low, up = widen64(low, up, err)
    with np.errstate(over="ignore"):
        return round_down32(low), round_up32(up)


def matvec_interval(M: np.ndarray, v: list[Interval]) -> list[Interval]:
    lo = np.array([iv.lo for iv in v], dtype=F32)
    hi = np.array([iv.hi for iv in v], dtype=F32)
    flag = any(iv.overflow for iv in v)
    rlo, rhi = interval_matvec(M, lo, hi)
    out = []
    for a, b in zip(rlo, rhi):
        out.append(Interval(a, b, flag or bool(np.isinf(a) or np.isinf(b))))
    return out
