"""FGSM, PGD with random restarts, and the interval-gradient attack.

All budgets and step sizes are in the original [0, 1] input scale; the input
domain converts them to network coordinates.  A reported success is always
re-checked with a concrete forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analysis import Box, interval_gradient, is_verified, propagate, worst_case_logits
from .data_io import UNIT_DOMAIN, InputDomain
from .model import Network, cross_entropy, forward, loss_and_grads
from .numerics import F32, F64, make_rng, round_down32, round_up32

KINDS = ("fgsm", "pgd", "interval")


@dataclass
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 0.1
    pgd_steps: int = 40
    pgd_step: float = 0.01
    restarts: int = 1
    random_start: bool = True
    ia_iters: int = 20
    ia_step: float | None = None     # default epsilon / 4
    ia_eps0: float | None = None     # default epsilon / 16
    ia_p: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.pgd_step <= 0 or (self.ia_step is not None and self.ia_step <= 0):
            raise ValueError("step sizes must be positive")
        if self.ia_p <= 1:
            raise ValueError("region growth factor p must exceed 1")
        if self.restarts < 1 or self.pgd_steps < 0 or self.ia_iters < 0:
            raise ValueError("restarts >= 1, iteration counts >= 0")

    @property
    def interval_step(self) -> float:
        return self.ia_step if self.ia_step is not None else self.epsilon / 4

    @property
    def interval_eps0(self) -> float:
        return self.ia_eps0 if self.ia_eps0 is not None else self.epsilon / 16

    def resolved(self) -> dict:
        d = dict(self.__dict__)
        d["ia_step"], d["ia_eps0"] = self.interval_step, self.interval_eps0
        return d


@dataclass
class AttackOutcome:
    success: bool
    x_adv: np.ndarray | None
    loss: float
    iterations: int
    notes: dict = field(default_factory=dict)


def ball(x, eps: float, domain: InputDomain = UNIT_DOMAIN):
    """Float32 bounds strictly inside B_eps(x), intersected with the domain."""
    x64 = np.asarray(x, F32).astype(F64)
    r = domain.radius(eps)
    lo = np.maximum(round_up32(x64 - r), np.asarray(domain.lo, F32))
    hi = np.minimum(round_down32(x64 + r), np.asarray(domain.hi, F32))
    x32 = x64.astype(F32)
    return np.minimum(lo, x32), np.maximum(hi, x32)


def is_violation(net: Network, x, y: int, x_adv, eps: float,
                 domain: InputDomain = UNIT_DOMAIN) -> bool:
    """Concrete check: x_adv is misclassified, inside B_eps(x) and inside the domain."""
    x_adv = np.asarray(x_adv, F32)
    diff = np.abs(x_adv.astype(F64) - np.asarray(x, F32).astype(F64))
    if np.any(diff > domain.radius(eps)):
        return False
    if np.any(x_adv < np.asarray(domain.lo, F32)) or np.any(x_adv > np.asarray(domain.hi, F32)):
        return False
    return int(np.argmax(forward(net, x_adv))) != int(y)


def _misclassified(net, X, Y):
    return np.argmax(forward(net, X), axis=-1) != Y


def pgd_batch(net: Network, X, Y, eps: float, steps: int, step_size: float, rng=None,
              domain: InputDomain = UNIT_DOMAIN, random_start: bool = True, start=None):
    """Sign-gradient ascent on cross-entropy with projection, one run per row.

    Returns (best iterate, its loss, success mask, first violating iterate).
    The best iterate is taken over post-step iterates only (or the start if
    ``steps == 0``).
    """
    X = np.atleast_2d(np.asarray(X, F32))
    Y = np.atleast_1d(np.asarray(Y))
    lo, hi = ball(X, eps, domain)
    step = np.asarray(domain.radius(step_size), dtype=F32)
    if start is not None:
        Xa = np.clip(np.asarray(start, F32), lo, hi)
    elif random_start and eps > 0:
        if rng is None:
            rng = make_rng(0)
        Xa = (lo + rng.random(X.shape) * (hi.astype(F64) - lo)).astype(F32)
        Xa = np.clip(Xa, lo, hi)
    else:
        Xa = X.copy()

    found = _misclassified(net, Xa, Y)
    first = np.where(found[:, None], Xa, 0).astype(F32)
    best = Xa.copy()
    best_loss = cross_entropy(forward(net, Xa), Y) if steps == 0 else np.full(len(Y), -np.inf)
    for _ in range(steps):
        _, _, gx, _ = loss_and_grads(net, Xa, Y, weights=np.ones(len(Y), F32))
        Xa = np.clip(Xa + step * np.sign(gx).astype(F32), lo, hi).astype(F32)
        logits = forward(net, Xa)
        losses = cross_entropy(logits, Y)
        better = losses > best_loss
        best[better] = Xa[better]
        best_loss = np.where(better, losses, best_loss)
        mis = (np.argmax(logits, axis=-1) != Y) & ~found
        first[mis] = Xa[mis]
        found |= mis
    return best, best_loss, found, first


def fgsm(net: Network, x, y: int, eps: float, domain: InputDomain = UNIT_DOMAIN) -> AttackOutcome:
    x = np.asarray(x, F32)
    lo, hi = ball(x, eps, domain)
    _, _, gx, _ = loss_and_grads(net, x[None], [y])
    r = np.asarray(domain.radius(eps), dtype=F32)
    xa = np.clip(x + r * np.sign(gx[0]).astype(F32), lo, hi).astype(F32)
    loss = float(cross_entropy(forward(net, xa), y))
    ok = is_violation(net, x, y, xa, eps, domain)
    return AttackOutcome(ok, xa, loss, 1)


def pgd(net: Network, x, y: int, cfg: AttackConfig, domain: InputDomain = UNIT_DOMAIN,
        rng=None, start=None) -> AttackOutcome:
    """PGD with ``cfg.restarts`` runs; the first run starts at ``start`` if given.

    Reports the highest-loss iterate when it is a violation, otherwise the first
    violating iterate seen (if any).
    """
    x = np.asarray(x, F32)
    if rng is None:
        rng = make_rng(cfg.seed)
    R = cfg.restarts
    X = np.repeat(x[None], R, axis=0)
    lo, hi = ball(x, cfg.epsilon, domain)
    if cfg.random_start and cfg.epsilon > 0:
        starts = (lo + rng.random(X.shape) * (hi.astype(F64) - lo)).astype(F32)
    else:
        starts = X.copy()
    if start is not None:
        starts[0] = start
    starts = np.clip(starts, lo, hi)
    best, best_loss, found, first = pgd_batch(net, X, np.full(R, y), cfg.epsilon,
                                              cfg.pgd_steps, cfg.pgd_step, domain=domain,
                                              start=starts)
    top = int(np.argmax(best_loss))
    if is_violation(net, x, y, best[top], cfg.epsilon, domain):
        return AttackOutcome(True, best[top], float(best_loss[top]), cfg.pgd_steps,
                             {"restart": top})
    for i in np.flatnonzero(found):
        if is_violation(net, x, y, first[i], cfg.epsilon, domain):
            loss = float(cross_entropy(forward(net, first[i]), y))
            return AttackOutcome(True, first[i], loss, cfg.pgd_steps, {"restart": int(i)})
    return AttackOutcome(False, best[top], float(best_loss[top]), cfg.pgd_steps)


def interval_attack(net: Network, x, y: int, cfg: AttackConfig,
                    domain: InputDomain = UNIT_DOMAIN, rng=None) -> AttackOutcome:
    """Interval-gradient search for a promising region, then PGD from there.

    Each iteration grows the analysed region around the current point from
    eps0 by factor p until the symbolic bounds admit a violation (or the
    radius reaches eps/2), then steps along the interval gradient of that
    region and projects back into B_eps(x).
    """
    x = np.asarray(x, F32)
    eps = cfg.epsilon
    lo, hi = ball(x, eps, domain)
    if is_violation(net, x, y, x, eps, domain):
        return AttackOutcome(True, x.copy(), float(cross_entropy(forward(net, x), y)), 1)
    step = domain.radius(cfg.interval_step)
    xp = x.copy()
    regions = []
    for i in range(1, cfg.ia_iters + 1):
        e = cfg.interval_eps0
        box = Box.around(xp, e, domain)
        prop = propagate(net, box)
        while is_verified(worst_case_logits(prop.output, y), y):
            e *= cfg.ia_p
            box = Box.around(xp, e, domain)
            prop = propagate(net, box)
            if e >= eps / 2:
                break
        regions.append(e)
        g = interval_gradient(net, box, y, prop).astype(F64)
        xp = np.clip((xp.astype(F64) + step * g).astype(F32), lo, hi)
        if is_violation(net, x, y, xp, eps, domain):
            loss = float(cross_entropy(forward(net, xp), y))
            return AttackOutcome(True, xp, loss, i, {"regions": regions})
    out = pgd(net, x, y, cfg, domain, rng=rng, start=xp)
    out.iterations += cfg.ia_iters
    out.notes["regions"] = regions
    return out


def run_attack(net: Network, x, y: int, cfg: AttackConfig, domain: InputDomain = UNIT_DOMAIN,
               rng=None) -> AttackOutcome:
    if cfg.kind == "fgsm":
        return fgsm(net, x, y, cfg.epsilon, domain)
    if cfg.kind == "pgd":
        return pgd(net, x, y, cfg, domain, rng)
    return interval_attack(net, x, y, cfg, domain, rng)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return make_rng(np.random.SeedSequence([seed, index]))


def attack_success_rate(net: Network, X, Y, cfg: AttackConfig,
                        domain: InputDomain = UNIT_DOMAIN):
    """Fraction of samples with a confirmed violation, plus per-sample outcomes."""
    X = np.atleast_2d(X)
    if len(X) == 0:
        raise ValueError("empty dataset")
    outcomes = [run_attack(net, x, int(y), cfg, domain, sample_rng(cfg.seed, i))
                for i, (x, y) in enumerate(zip(X, Y))]
    rate = sum(o.success for o in outcomes) / len(outcomes)
    return rate, outcomes
