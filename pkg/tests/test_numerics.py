import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from verirobust.numerics import (F32, F64, DimensionError, Interval, NonFiniteError, interval_add,
                                 interval_matvec, interval_mul, interval_mul_scalar, interval_relu,
                                 make_rng, mat32, matvec, matvec_interval, round_down32,
                                 round_up32, spawn_rngs, vec32)

finite32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@st.composite
def intervals(draw, lo=-1e6, hi=1e6):
    a = draw(st.floats(lo, hi, allow_nan=False, width=32))
    b = draw(st.floats(lo, hi, allow_nan=False, width=32))
    return Interval(min(a, b), max(a, b))


def _exact(x):
    return F64(x)


def test_add_small_example():
    r = Interval(1, 2) + Interval(3, 4)
    assert r.lo <= 4 and r.hi >= 6
    assert r.width <= 2 + 2 * (np.spacing(F32(6)) + np.spacing(F32(4)))


@given(intervals())
def test_add_zero_is_superset(a):
    r = Interval(0, 0) + a
    assert r.lo <= a.lo and r.hi >= a.hi


@given(intervals(), intervals(), st.floats(0, 1), st.floats(0, 1))
def test_add_contains_sampled_sums(a, b, s, t):
    x = _exact(a.lo) + s * (_exact(a.hi) - a.lo)
    y = _exact(b.lo) + t * (_exact(b.hi) - b.lo)
    x, y = min(max(x, a.lo), a.hi), min(max(y, b.lo), b.hi)
    r = interval_add(a, b)
    assert r.lo <= x + y <= r.hi


def test_add_containment_randomized():
    rng = make_rng(7)
    n = 100_000
    lo = rng.uniform(-100, 100, (n, 2)).astype(F32)
    hi = (lo + rng.uniform(0, 10, (n, 2))).astype(F32)
    bad = 0
    for i in range(n):
        a, b = Interval(lo[i, 0], hi[i, 0]), Interval(lo[i, 1], hi[i, 1])
        r = a + b
        mid = (F64(a.lo) + a.hi) / 2 + (F64(b.lo) + b.hi) / 2
        bad += not (r.lo <= F64(a.lo) + F64(b.lo) and r.lo <= mid <= r.hi
                    and r.hi >= F64(a.hi) + F64(b.hi))
    assert bad == 0


@given(intervals(-1e3, 1e3), st.floats(-1e3, 1e3, allow_nan=False, width=32))
def test_mul_scalar_contains(a, c):
    r = interval_mul_scalar(a, c)
    for x in (a.lo, a.hi):
        assert r.lo <= F64(x) * F64(F32(c)) <= r.hi


def test_mul_scalar_negative_swaps():
    r = Interval(-1, 2) * 3
    assert r.lo <= -3 and r.hi >= 6
    r = Interval(-1, 2) * -3
    assert r.lo <= -6 and r.hi >= 3 and r.hi < 3.01


def test_rounding_hazard_tiny_products_not_zero():
    r = Interval(1e-8, 2e-8) * 1000
    assert r.lo <= 1e-5 <= 2e-5 <= r.hi
    assert r.hi > 0 and r.lo > 0


@given(intervals(-1e3, 1e3), intervals(-1e3, 1e3))
def test_mul_contains_endpoint_products(a, b):
    r = interval_mul(a, b)
    for x in (a.lo, a.hi):
        for y in (b.lo, b.hi):
            assert r.lo <= F64(x) * F64(y) <= r.hi


def test_relu():
    r = interval_relu(Interval(-1, 2))
    assert (r.lo, r.hi) == (0, 2)
    assert Interval(-3, -1).relu().hi == 0


def test_overflow_is_sticky():
    big = Interval(3e38, 3e38)
    r = big + big
    assert r.overflow and np.isinf(r.hi)
    r2 = r + Interval(0, 0)
    assert r2.overflow
    assert not (Interval(1, 2) + Interval(1, 2)).overflow


def test_interval_rejects_bad_endpoints():
    with pytest.raises(ValueError):
        Interval(2, 1)
    with pytest.raises(NonFiniteError):
        Interval(float("nan"), 1)


@given(st.floats(-1e30, 1e30, allow_nan=False))
def test_directed_rounding(x):
    lo, hi = round_down32(x), round_up32(x)
    assert F64(lo) <= x <= F64(hi)
    assert F64(hi) - F64(lo) <= F64(np.spacing(np.abs(F32(x)))) * 2


def test_outward_superset_of_inward():
    # 64-bit result down-converted inward is always enclosed
    rng = make_rng(3)
    for _ in range(2000):
        a = np.sort(rng.uniform(-10, 10, 2)).astype(F32)
        b = np.sort(rng.uniform(-10, 10, 2)).astype(F32)
        r = Interval(*a) + Interval(*b)
        lo64, hi64 = F64(a[0]) + b[0], F64(a[1]) + b[1]
        assert r.lo <= round_up32(lo64) and r.hi >= round_down32(hi64)


def test_vec_mat_constructors_reject_nonfinite():
    with pytest.raises(NonFiniteError):
        vec32([1.0, np.inf])
    with pytest.raises(NonFiniteError):
        mat32([[np.nan]])
    with pytest.raises(DimensionError):
        mat32([1.0, 2.0])
    m = mat32([[1, 2], [3, 4]])
    assert m.dtype == F32 and m.flags.c_contiguous and m.shape == (2, 2)


def test_matvec_identity_and_shape_error():
    v = np.arange(5, dtype=F32)
    assert np.array_equal(matvec(np.eye(5, dtype=F32), v), v)
    with pytest.raises(DimensionError):
        matvec(np.eye(3, dtype=F32), v)
    with pytest.raises(DimensionError):
        interval_matvec(np.eye(3, dtype=F32), v, v)


def test_matvec_interval_hand_example():
    (r,) = matvec_interval(np.array([[2.0, -1.0]], F32), [Interval(0, 1), Interval(0, 1)])
    assert r.lo <= -1 and r.hi >= 2 and r.width < 3 + 1e-5


def test_interval_matvec_sampling():
    rng = make_rng(11)
    M = rng.standard_normal((8, 8)).astype(F32)
    b = rng.standard_normal(8).astype(F32)
    lo = rng.uniform(-1, 0, 8).astype(F32)
    hi = rng.uniform(0, 1, 8).astype(F32)
    rlo, rhi = interval_matvec(M, lo, hi, bias=b)
    pts = lo + rng.random((10_000, 8)) * (hi.astype(F64) - lo)
    vals = pts @ M.T.astype(F64) + b
    assert np.all(vals >= rlo) and np.all(vals <= rhi)


def test_rng_determinism():
    a = make_rng(42).random(100)
    b = make_rng(42).random(100)
    assert np.array_equal(a, b)
    s1, s2 = spawn_rngs(5, 2)
    assert not np.array_equal(s1.random(4), s2.random(4))
    # PCG64 stream is fixed by the algorithm, not the platform
    assert make_rng(0).integers(0, 2**32, 1)[0] == np.random.Generator(np.random.PCG64(0)).integers(0, 2**32, 1)[0]
