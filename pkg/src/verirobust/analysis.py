"""Symbolic linear relaxation of ReLU networks over L-inf boxes.

Two entry points share the same relaxation rules:

* :func:`propagate` is the sound path used for certification.  Coefficients
  are stored as float32, every product/sum is accumulated in float64 with an
  explicit error bound, and the bound (plus float32 storage error) is pushed
  into the equation constants so each stored equation still encloses the
  exact real-valued network.
* :func:`robust_loss_grad` is the batched, differentiable (but unrounded)
  version used as a training objective.  Its reverse pass is written out by
  hand.

ReLU relaxation for a neuron whose upper equation ranges over [lu, uu] and
lower equation over [ll, ul] on the box:

* uu <= 0            both equations become 0
* ll >= 0            both pass through
* otherwise          upper: uu/(uu-lu) * (Eq_up - lu) if lu < 0, else unchanged
                     lower: ul/(ul-ll) * Eq_low      if ul > 0, else 0
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import UNIT_DOMAIN, InputDomain
from .model import Gradients, Network, cross_entropy, softmax
from .numerics import (F32, F64, DimensionError, interval_matvec, round_down32, round_up32,
                       sum_error, widen64)

_U64 = 2.0 ** -53


@dataclass(frozen=True)
class Box:
    """Axis-aligned input box, already intersected with the input domain."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=F32).reshape(-1)
        hi = np.asarray(self.hi, dtype=F32).reshape(-1)
        if lo.shape != hi.shape or np.any(lo > hi) or np.any(np.isnan(lo)):
            raise ValueError("invalid box: need lo <= hi elementwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def around(cls, x, eps: float, domain: InputDomain = UNIT_DOMAIN) -> "Box":
        """B_eps(x) intersected with the domain; eps is in original pixel units."""
        x64 = np.asarray(x, dtype=F32).astype(F64)
        r = domain.radius(eps)
        lo = np.maximum(round_down32(x64 - r), np.asarray(domain.lo, F32))
        hi = np.minimum(round_up32(x64 + r), np.asarray(domain.hi, F32))
        return cls(np.minimum(lo, x64.astype(F32)), np.maximum(hi, x64.astype(F32)))

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def center(self) -> np.ndarray:
        return ((self.lo.astype(F64) + self.hi) / 2).astype(F32)

    @property
    def width(self) -> np.ndarray:
        return self.hi.astype(F64) - self.lo

    def contains(self, pts) -> np.ndarray:
        pts = np.asarray(pts)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)

    def split(self, dim: int) -> tuple["Box", "Box"]:
        """Two children sharing the midpoint plane of ``dim``."""
        mid = F32((F64(self.lo[dim]) + F64(self.hi[dim])) / 2)
        mid = min(max(mid, self.lo[dim]), self.hi[dim])
        hi1, lo2 = self.hi.copy(), self.lo.copy()
        hi1[dim] = mid
        lo2[dim] = mid
        return Box(self.lo, hi1), Box(lo2, self.hi)

    def sample(self, rng, n: int) -> np.ndarray:
        u = rng.random((n, self.dim))
        pts = self.lo + u * (self.hi.astype(F64) - self.lo)
        return np.clip(pts.astype(F32), self.lo, self.hi)


@dataclass
class SymbolicBounds:
    """Affine lower/upper equations over the input for one layer's pre-activations.

    ``lower``/``upper`` are the concrete min of Eq_low and max of Eq_up over
    the box; ``low_upper``/``up_lower`` are the other two extremes, needed to
    relax the next ReLU.
    """

    low_coef: np.ndarray
    low_const: np.ndarray
    up_coef: np.ndarray
    up_const: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    low_upper: np.ndarray
    up_lower: np.ndarray

    def eval_low(self, x) -> np.ndarray:
        return np.asarray(x, F64) @ self.low_coef.T.astype(F64) + self.low_const

    def eval_up(self, x) -> np.ndarray:
        return np.asarray(x, F64) @ self.up_coef.T.astype(F64) + self.up_const


@dataclass
class Relaxation:
    up_slope: np.ndarray
    up_offset: np.ndarray
    low_slope: np.ndarray


@dataclass
class Propagation:
    layers: list[SymbolicBounds]
    relaxations: list[Relaxation]
    overflow: bool = False

    @property
    def output(self) -> SymbolicBounds:
        return self.layers[-1]


# -- sound propagation ------------------------------------------------------------

def _concretize(A, c, lo64, hi64, xmag):
    """Outward-rounded (min, max) of A x + c over the box."""
    A64 = A.astype(F64)
    Ap, An = np.maximum(A64, 0), np.minimum(A64, 0)
    c64 = c.astype(F64)
    mx = Ap @ hi64 + An @ lo64 + c64
    mn = Ap @ lo64 + An @ hi64 + c64
    err = sum_error(A.shape[1] + 1, np.abs(A64) @ xmag + np.abs(c64))
    mn, mx = widen64(mn, mx, err)
    return round_down32(mn), round_up32(mx)


def _store_eq(A64, errA, c64, errc, xmag, upper: bool):
    """Round an equation to float32, folding every error into the constant."""
    A32 = A64.astype(F32)
    D = np.abs(A64 - A32.astype(F64))
    if errA is not None:
        D = D + errA
    slack = (D @ xmag) * (1 + (A64.shape[1] + 4) * _U64) + errc
    slack = slack * (1 + 4 * _U64)
    if upper:
        c = round_up32(np.nextafter(c64 + slack, np.inf))
    else:
        c = round_down32(np.nextafter(c64 - slack, -np.inf))
    return A32, c


def _relax_sound(sb: SymbolicBounds) -> Relaxation:
    uu, lu = sb.upper.astype(F64), sb.up_lower.astype(F64)
    ul, ll = sb.low_upper.astype(F64), sb.lower.astype(F64)
    dead = uu <= 0
    active = (ll >= 0) & ~dead
    cross = ~dead & ~active
    chord = cross & (lu < 0)
    low_cross = cross & (ul > 0)

    su = np.where(active | (cross & ~chord), 1.0, 0.0).astype(F32)
    ou = np.zeros_like(su)
    sl = np.where(active, 1.0, 0.0).astype(F32)
    with np.errstate(divide="ignore", invalid="ignore"):
        if chord.any():
            # any slope >= uu/(uu-lu) keeps the chord an upper bound
            s = round_up32(np.nextafter(uu[chord] / (uu[chord] - lu[chord]), np.inf))
            su[chord] = np.minimum(s, F32(1.0))
            ou[chord] = round_up32(-su[chord].astype(F64) * lu[chord])
        if low_cross.any():
            # any slope in [0, 1] gives a valid lower bound
            s = (ul[low_cross] / (ul[low_cross] - ll[low_cross])).astype(F32)
            sl[low_cross] = np.clip(s, 0, 1)
    return Relaxation(su, ou, sl)


def _apply_relaxation(sb: SymbolicBounds, rx: Relaxation, xmag):
    su, ou, sl = (v.astype(F64) for v in (rx.up_slope, rx.up_offset, rx.low_slope))
    Au64 = su[:, None] * sb.up_coef.astype(F64)        # exact products
    cu64 = su * sb.up_const.astype(F64) + ou
    ecu = np.abs(cu64) * 2 * _U64
    Al64 = sl[:, None] * sb.low_coef.astype(F64)
    cl64 = sl * sb.low_const.astype(F64)
    Au, cu = _store_eq(Au64, None, cu64, ecu, xmag, upper=True)
    Al, cl = _store_eq(Al64, None, cl64, np.zeros_like(cl64), xmag, upper=False)
    return Au, cu, Al, cl


def _affine_sound(W, b, Au, cu, Al, cl, xmag):
    W64, b64 = W.astype(F64), b.astype(F64)
    Wp, Wn = np.maximum(W64, 0), np.minimum(W64, 0)
    Au64, Al64 = Au.astype(F64), Al.astype(F64)
    cu64, cl64 = cu.astype(F64), cl.astype(F64)
    aAu, aAl = np.abs(Au64), np.abs(Al64)
    n = W.shape[1]

    up_A = Wp @ Au64 + Wn @ Al64
    up_errA = sum_error(2 * n, Wp @ aAu - Wn @ aAl)
    up_c = Wp @ cu64 + Wn @ cl64 + b64
    up_errc = sum_error(2 * n + 1, Wp @ np.abs(cu64) - Wn @ np.abs(cl64) + np.abs(b64))

    lo_A = Wp @ Al64 + Wn @ Au64
    lo_errA = sum_error(2 * n, Wp @ aAl - Wn @ aAu)
    lo_c = Wp @ cl64 + Wn @ cu64 + b64
    lo_errc = sum_error(2 * n + 1, Wp @ np.abs(cl64) - Wn @ np.abs(cu64) + np.abs(b64))

    Au_n, cu_n = _store_eq(up_A, up_errA, up_c, up_errc, xmag, upper=True)
    Al_n, cl_n = _store_eq(lo_A, lo_errA, lo_c, lo_errc, xmag, upper=False)
    return Au_n, cu_n, Al_n, cl_n


def _bounds(Au, cu, Al, cl, lo64, hi64, xmag) -> SymbolicBounds:
    lu, uu = _concretize(Au, cu, lo64, hi64, xmag)
    ll, ul = _concretize(Al, cl, lo64, hi64, xmag)
    return SymbolicBounds(Al, cl, Au, cu, lower=ll, upper=uu, low_upper=ul, up_lower=lu)


def _unbounded(n: int, d: int) -> SymbolicBounds:
    inf = np.full(n, np.inf, dtype=F32)
    z = np.zeros((n, d), dtype=F32)
    return SymbolicBounds(z, -inf, z.copy(), inf, -inf, inf, inf, -inf)


def propagate(net: Network, box: Box, frozen: list[Relaxation] | None = None) -> Propagation:
    """Sound symbolic bounds for every layer's pre-activations over ``box``.

    With ``frozen`` the given ReLU relaxations are reused instead of being
    derived from the box; the result is then only sound if those relaxations
    happen to be valid for the box (used to differentiate with a fixed
    relaxation pattern).
    """
    if box.dim != net.input_dim:
        raise DimensionError(f"box has {box.dim} dims, network expects {net.input_dim}")
    lo64, hi64 = box.lo.astype(F64), box.hi.astype(F64)
    xmag = np.maximum(np.abs(lo64), np.abs(hi64))
    W0, b0 = net.weights[0], net.biases[0]
    Au, cu, Al, cl = W0, b0, W0, b0
    layers, relaxations = [], []
    overflow = False
    last = len(net.weights) - 1
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(len(net.weights)):
            if i > 0:
                rx = frozen[i - 1] if frozen is not None else _relax_sound(layers[-1])
                relaxations.append(rx)
                post = _apply_relaxation(layers[-1], rx, xmag)
                Au, cu, Al, cl = _affine_sound(net.weights[i], net.biases[i], *post, xmag)
            sb = _bounds(Au, cu, Al, cl, lo64, hi64, xmag)
            finite = all(np.all(np.isfinite(v)) for v in (Au, cu, Al, cl, sb.lower, sb.upper))
            if not finite:
                overflow = True
                for j in range(i, last + 1):
                    layers.append(_unbounded(net.weights[j].shape[0], box.dim))
                break
            layers.append(sb)
    return Propagation(layers, relaxations, overflow)


def propagate_intervals(net: Network, box: Box) -> list[tuple[np.ndarray, np.ndarray]]:
    """Naive interval propagation (concrete bounds only), outward rounded."""
    lo, hi = box.lo, box.hi
    out = []
    last = len(net.weights) - 1
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            lo, hi = interval_matvec(w, lo, hi, bias=b)
            out.append((lo, hi))
            if i < last:
                lo, hi = np.maximum(lo, 0), np.maximum(hi, 0)
    return out


# -- worst-case logits, robust loss, interval gradient -------------------------------

def worst_case_logits(bounds_out: SymbolicBounds | tuple, y: int) -> np.ndarray:
    """Lower bound for logit y, upper bounds for every other logit."""
    if isinstance(bounds_out, SymbolicBounds):
        lower, upper = bounds_out.lower, bounds_out.upper
    else:
        lower, upper = bounds_out
    d = np.array(upper, dtype=F32, copy=True)
    d[y] = lower[y]
    return d


def is_verified(d: np.ndarray, y: int) -> bool:
    """argmax(d) == y with ties counted as not verified."""
    if not np.all(np.isfinite(d)):
        return False
    others = np.delete(d, y)
    return bool(d[y] > others.max())


def worst_case(net: Network, box: Box, y: int, mode: str = "symbolic") -> np.ndarray:
    if mode == "symbolic":
        return worst_case_logits(propagate(net, box).output, y)
    if mode == "interval":
        return worst_case_logits(propagate_intervals(net, box)[-1], y)
    raise ValueError(f"unknown bound mode {mode!r}")


def verifiable_robust_loss(net: Network, box: Box, y: int, mode: str = "symbolic") -> float:
    d = worst_case(net, box, y, mode)
    if not np.all(np.isfinite(d)):
        return float("inf")
    return float(cross_entropy(d.astype(F64), y))


def interval_gradient(net: Network, box: Box, y: int,
                      prop: Propagation | None = None) -> np.ndarray:
    """Gradient of the verifiable robust loss w.r.t. the box center.

    Relaxation slopes are held fixed, so this is the slope of the output
    bounding equations weighted by the loss gradient.
    """
    if prop is None:
        prop = propagate(net, box)
    out = prop.output
    d = worst_case_logits(out, y).astype(F64)
    if not np.all(np.isfinite(d)):
        return np.zeros(box.dim, dtype=F32)
    g = softmax(d)
    g[y] -= 1.0
    coef = out.up_coef.astype(F64).copy()
    coef[y] = out.low_coef[y]
    return (g @ coef).astype(F32)


# -- differentiable batched relaxation for training --------------------------------

def _relax_train(uu, lu, ul, ll):
    dead = uu <= 0
    active = (ll >= 0) & ~dead
    cross = ~dead & ~active
    chord = cross & (lu < 0)
    low_cross = cross & (ul > 0)
    one = np.ones_like(uu)
    with np.errstate(divide="ignore", invalid="ignore"):
        su = np.where(chord, uu / np.where(chord, uu - lu, 1), np.where(active | cross, one, 0))
        sl = np.where(low_cross, ul / np.where(low_cross, ul - ll, 1), np.where(active, one, 0))
    ou = np.where(chord, -su * lu, 0)
    return su, ou, sl, chord, low_cross


def robust_loss_grad(net: Network, X, Y, eps: float, domain: InputDomain = UNIT_DOMAIN,
                     sample_weights=None, need_grad: bool = True, dtype=F32):
    """Per-sample verifiable robust losses for a batch and, optionally, the
    gradient of ``sum_b w_b * loss_b`` w.r.t. all weights and biases.

    Same relaxation as :func:`propagate` but without directed rounding.
    """
    X = np.atleast_2d(np.asarray(X, dtype=F32))
    Y = np.atleast_1d(np.asarray(Y))
    B = len(Y)
    r64 = domain.radius(eps)
    lo = np.maximum(X.astype(F64) - r64, np.asarray(domain.lo, F64))
    hi = np.minimum(X.astype(F64) + r64, np.asarray(domain.hi, F64))
    x0 = ((lo + hi) / 2).astype(dtype)
    rad = ((hi - lo) / 2).astype(dtype)
    Ws = [w.astype(dtype) for w in net.weights]
    bs = [b.astype(dtype) for b in net.biases]

    Au = np.broadcast_to(Ws[0], (B,) + Ws[0].shape)
    Al = Au
    cu = np.broadcast_to(bs[0], (B, bs[0].shape[0]))
    cl = cu
    cache = []
    n_layers = len(Ws)
    for i in range(n_layers):
        if i > 0:
            uu, lu, ul, ll = conc
            su, ou, sl, chord, low_cross = _relax_train(uu, lu, ul, ll)
            Aup, cup = su[..., None] * Au, su * cu + ou
            Alp, clp = sl[..., None] * Al, sl * cl
            cache.append(dict(Au=Au, cu=cu, Al=Al, cl=cl, uu=uu, lu=lu, ul=ul, ll=ll, su=su,
                              sl=sl, chord=chord, low_cross=low_cross,
                              Aup=Aup, cup=cup, Alp=Alp, clp=clp))
            Wp, Wn = np.maximum(Ws[i], 0), np.minimum(Ws[i], 0)
            Au = np.matmul(Wp, Aup) + np.matmul(Wn, Alp)
            Al = np.matmul(Wp, Alp) + np.matmul(Wn, Aup)
            cu = cup @ Wp.T + clp @ Wn.T + bs[i]
            cl = clp @ Wp.T + cup @ Wn.T + bs[i]
        axu = np.einsum("bnd,bd->bn", Au, x0)
        rdu = np.einsum("bnd,bd->bn", np.abs(Au), rad)
        if Al is Au:
            axl, rdl = axu, rdu
        else:
            axl = np.einsum("bnd,bd->bn", Al, x0)
            rdl = np.einsum("bnd,bd->bn", np.abs(Al), rad)
        conc = (axu + rdu + cu, axu - rdu + cu, axl + rdl + cl, axl - rdl + cl)

    uu, _, _, ll = conc
    rows = np.arange(B)
    d = uu.copy()
    d[rows, Y] = ll[rows, Y]
    losses = cross_entropy(d, Y)
    if not need_grad:
        return losses, None

    w = np.full(B, 1.0, dtype) if sample_weights is None else np.asarray(sample_weights, dtype)
    g = softmax(d) * w[:, None]
    g[rows, Y] -= w
    g_uu = g.copy()
    g_uu[rows, Y] = 0
    g_ll = np.zeros_like(g)
    g_ll[rows, Y] = g[rows, Y]

    # final layer equations: uu depends on (Au, cu), ll on (Al, cl)
    dAu = g_uu[..., None] * (x0[:, None, :] + np.sign(Au) * rad[:, None, :])
    dcu = g_uu
    dAl = g_ll[..., None] * (x0[:, None, :] - np.sign(Al) * rad[:, None, :])
    dcl = g_ll

    gW: list[np.ndarray] = [None] * n_layers
    gb: list[np.ndarray] = [None] * n_layers
    for i in range(n_layers - 1, 0, -1):
        c = cache[i - 1]
        W = Ws[i]
        Wp, Wn = np.maximum(W, 0), np.minimum(W, 0)
        Aup, Alp, cup, clp = c["Aup"], c["Alp"], c["cup"], c["clp"]
        dWp = (np.tensordot(dAu, Aup, axes=([0, 2], [0, 2]))
               + np.tensordot(dAl, Alp, axes=([0, 2], [0, 2]))
               + dcu.T @ cup + dcl.T @ clp)
        dWn = (np.tensordot(dAu, Alp, axes=([0, 2], [0, 2]))
               + np.tensordot(dAl, Aup, axes=([0, 2], [0, 2]))
               + dcu.T @ clp + dcl.T @ cup)
        gW[i] = dWp * (W > 0) + dWn * (W < 0)
        gb[i] = (dcu + dcl).sum(axis=0)

        dAup = np.matmul(Wp.T, dAu) + np.matmul(Wn.T, dAl)
        dAlp = np.matmul(Wp.T, dAl) + np.matmul(Wn.T, dAu)
        dcup = dcu @ Wp + dcl @ Wn
        dclp = dcl @ Wp + dcu @ Wn

        su, sl = c["su"], c["sl"]
        Au_p, Al_p, cu_p, cl_p = c["Au"], c["Al"], c["cu"], c["cl"]
        uu, lu, ul, ll = c["uu"], c["lu"], c["ul"], c["ll"]
        chord, low_cross = c["chord"], c["low_cross"]

        dsu = np.einsum("bnd,bnd->bn", dAup, Au_p) + dcup * cu_p
        dsl = np.einsum("bnd,bnd->bn", dAlp, Al_p) + dclp * cl_p
        dou = np.where(chord, dcup, 0)
        dsu = dsu - lu * dou
        dlu = -su * dou
        with np.errstate(divide="ignore", invalid="ignore"):
            den_u = np.where(chord, (uu - lu) ** 2, 1)
            den_l = np.where(low_cross, (ul - ll) ** 2, 1)
            duu = np.where(chord, dsu * (-lu) / den_u, 0)
            dlu = dlu + np.where(chord, dsu * uu / den_u, 0)
            dul = np.where(low_cross, dsl * (-ll) / den_l, 0)
            dll = np.where(low_cross, dsl * ul / den_l, 0)

        dAu_new = su[..., None] * dAup
        dAl_new = sl[..., None] * dAlp
        dcu_new = su * dcup
        dcl_new = sl * dclp
        # concretization of this layer's pre-activation equations
        dAu_new = dAu_new + ((duu + dlu)[..., None] * x0[:, None, :]
                             + (duu - dlu)[..., None] * np.sign(Au_p) * rad[:, None, :])
        dcu_new = dcu_new + duu + dlu
        dAl_new = dAl_new + ((dul + dll)[..., None] * x0[:, None, :]
                             + (dul - dll)[..., None] * np.sign(Al_p) * rad[:, None, :])
        dcl_new = dcl_new + dul + dll
        dAu, dAl, dcu, dcl = dAu_new, dAl_new, dcu_new, dcl_new

    gW[0] = (dAu + dAl).sum(axis=0)
    gb[0] = (dcu + dcl).sum(axis=0)
    return losses, Gradients(gW, gb)
