"""Per-input certification by input bisection, a work-sharing parallel driver,
and the ACC / ERA / VRA metrics.

A node of the bisection tree is a sub-box of B_eps(x).  Processing a node:

1. propagate sound symbolic bounds; if the worst-case logits certify y the
   node is a verified leaf;
2. otherwise try the box corner picked by the sign of the interval gradient,
   polish it with a few projected sign-gradient steps, and report a
   counterexample if the forward pass confirms a misclassification;
3. otherwise split along :func:`choose_split` and push both children, or
   give up as undecided at the depth / time / node budget.

An input is a counterexample if any leaf is, else undecided if any leaf is,
else verified.  Exploration only stops early on a counterexample, so the
verdict does not depend on the order in which nodes are visited (as long as
no wall-clock timeout fires).
"""
from __future__ import annotations

import csv
import multiprocessing as mp
import os
import queue
import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import Box, interval_gradient, is_verified, propagate, worst_case_logits
from .attack import AttackConfig, ball, is_violation, pgd_batch
from .data_io import UNIT_DOMAIN, Dataset, InputDomain
from .model import Network, forward, loss_and_grads
from .numerics import F32, F64, make_rng

VERIFIED = "verified"
COUNTEREXAMPLE = "counterexample"
UNDECIDED = "undecided"
MISCLASSIFIED = "misclassified"

# leaf status bits, shared between workers
_UNDECIDED_BIT = 1
_CE_BIT = 2


@dataclass
class RobustnessSpec:
    epsilon: float
    domain: InputDomain = UNIT_DOMAIN
    max_depth: int = 20
    timeout: float | None = 10.0     # seconds per input; None disables
    workers: int = 1
    max_nodes: int | None = None     # deterministic alternative to the timeout
    polish_steps: int = 5

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.workers < 1:
            raise ValueError("need at least one worker")
        if self.timeout is not None and self.timeout <= 0:
            raise ValueError("timeout must be positive")


@dataclass
class BisectionNode:
    box: Box
    depth: int = 0
    parent: int | None = None


@dataclass
class InputVerdict:
    index: int
    verdict: str
    nodes: int = 0
    millis: float = 0.0
    counterexample: np.ndarray | None = None
    reason: str = ""

    @property
    def verified(self) -> bool:
        return self.verdict == VERIFIED


@dataclass
class VerdictReport:
    verdicts: list[InputVerdict]
    acc: float | None = None
    era: float | None = None
    vra: float | None = None
    epsilon: float | None = None
    wall: float = 0.0

    def counts(self) -> dict:
        out = {VERIFIED: 0, COUNTEREXAMPLE: 0, UNDECIDED: 0, MISCLASSIFIED: 0}
        for v in self.verdicts:
            out[v.verdict] += 1
        return out

    def verdict_column(self) -> list[str]:
        return [v.verdict for v in self.verdicts]

    def summary_line(self) -> str:
        def fmt(v):
            return "NA" if v is None else f"{100 * v:.2f}"
        return f"ACC={fmt(self.acc)},ERA={fmt(self.era)},VRA={fmt(self.vra)}"

    def write_verdicts(self, path) -> None:
        """Scheduling-independent part of the report: index, verdict."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "verdict"])
            for v in self.verdicts:
                w.writerow([v.index, v.verdict])

    def write_timings(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "verdict", "nodes", "millis"])
            for v in self.verdicts:
                w.writerow([v.index, v.verdict, v.nodes, f"{v.millis:.3f}"])


# -- single node -------------------------------------------------------------------

def choose_split(g, box: Box) -> int:
    """Dimension with the largest width * |g_I|; lowest index on ties.

    Falls back to the widest dimension when every such product is zero.
    """
    width = box.width
    smear = width * np.abs(np.asarray(g, F64))
    if np.all(smear <= 0) or not np.all(np.isfinite(smear)):
        return int(np.argmax(width))
    return int(np.argmax(smear))


def _polish(net, y, start, lo, hi, steps):
    """Projected sign-gradient ascent on cross-entropy inside [lo, hi]."""
    xa = start.copy()
    step = ((hi.astype(F64) - lo) / 4).astype(F32)
    for _ in range(steps):
        if np.argmax(forward(net, xa)) != y:
            break
        _, _, gx, _ = loss_and_grads(net, xa[None], [y])
        xa = np.clip(xa + step * np.sign(gx[0]).astype(F32), lo, hi).astype(F32)
    return xa


@dataclass
class _Context:
    net: Network
    x: np.ndarray
    y: int
    spec: RobustnessSpec
    inner_lo: np.ndarray = field(init=False)
    inner_hi: np.ndarray = field(init=False)

    def __post_init__(self):
        self.inner_lo, self.inner_hi = ball(self.x, self.spec.epsilon, self.spec.domain)


def _expand(ctx: _Context, box: Box, depth: int):
    """Process one node; returns ('verified'|'undecided', None), ('ce', x) or ('split', children)."""
    net, y = ctx.net, ctx.y
    prop = propagate(net, box)
    d = worst_case_logits(prop.output, y)
    if is_verified(d, y):
        return VERIFIED, None
    # candidate points must lie in the true ball, which Box.around rounds outward
    lo = np.maximum(box.lo, ctx.inner_lo)
    hi = np.minimum(box.hi, ctx.inner_hi)
    if np.all(lo <= hi):
        g = interval_gradient(net, box, y, prop)
        corner = np.where(g > 0, hi, np.where(g < 0, lo, ((lo.astype(F64) + hi) / 2).astype(F32)))
        cand = _polish(net, y, corner.astype(F32), lo, hi, ctx.spec.polish_steps)
        if is_violation(net, ctx.x, y, cand, ctx.spec.epsilon, ctx.spec.domain):
            return COUNTEREXAMPLE, cand
    else:
        g = interval_gradient(net, box, y, prop)
    if depth >= ctx.spec.max_depth:
        return UNDECIDED, None
    dim = choose_split(g, box)
    if box.width[dim] <= 0:
        return UNDECIDED, None
    a, b = box.split(dim)
    if np.array_equal(a.hi, box.hi) or np.array_equal(b.lo, box.lo):
        return UNDECIDED, None      # float32 cannot represent a finer split
    return "split", (a, b)


def _root_box(x, spec: RobustnessSpec) -> Box:
    return Box.around(x, spec.epsilon, spec.domain)


# -- sequential -----------------------------------------------------------------------

def verify_input(net: Network, x, y: int, spec: RobustnessSpec, index: int = 0) -> InputVerdict:
    """Depth-first bisection of B_eps(x) until every leaf is decided."""
    t0 = time.perf_counter()
    x = np.asarray(x, F32)
    y = int(y)
    if int(np.argmax(forward(net, x))) != y:
        return InputVerdict(index, MISCLASSIFIED, 0, 0.0, x.copy(), "clean input misclassified")
    ctx = _Context(net, x, y, spec)
    deadline = None if spec.timeout is None else t0 + spec.timeout
    stack = [(_root_box(x, spec), 0)]
    nodes = 0
    status = 0
    reason = ""
    while stack:
        box, depth = stack.pop()
        over_time = deadline is not None and time.perf_counter() > deadline
        over_nodes = spec.max_nodes is not None and nodes >= spec.max_nodes
        if over_time or over_nodes:
            status |= _UNDECIDED_BIT
            reason = "timeout" if over_time else "node budget"
            continue
        nodes += 1
        kind, payload = _expand(ctx, box, depth)
        if kind == COUNTEREXAMPLE:
            ms = 1e3 * (time.perf_counter() - t0)
            return InputVerdict(index, COUNTEREXAMPLE, nodes, ms, payload, "confirmed")
        if kind == UNDECIDED:
            status |= _UNDECIDED_BIT
            reason = reason or "depth"
        elif kind == "split":
            a, b = payload
            stack.append((b, depth + 1))
            stack.append((a, depth + 1))
    ms = 1e3 * (time.perf_counter() - t0)
    if status & _UNDECIDED_BIT:
        return InputVerdict(index, UNDECIDED, nodes, ms, None, reason)
    return InputVerdict(index, VERIFIED, nodes, ms)


# -- parallel ---------------------------------------------------------------------------
#
# Workers share a task queue of (input, lo, hi, depth) nodes.  Each worker
# runs a local depth-first search on the node it took; whenever some other
# worker is idle it donates the shallow half of its local stack (the largest
# pending sub-boxes) back to the queue.  Per-input bookkeeping lives in
# shared memory: the number of outstanding tasks is raised *before* donated
# tasks become visible, so it only reaches zero when the input is finished.

_G: dict = {}


def _worker(wid: int):
    g = _G
    net, X, Y, spec = g["net"], g["X"], g["Y"], g["spec"]
    tasks, results, lock = g["tasks"], g["results"], g["lock"]
    idle, outstanding, status, nodes, started = (g["idle"], g["outstanding"], g["status"],
                                                 g["nodes"], g["started"])
    ce = g["ce"]
    ctxs: dict[int, _Context] = {}
    while True:
        with idle.get_lock():
            idle.value += 1
        item = tasks.get()
        with idle.get_lock():
            idle.value -= 1
        if item is None:
            return
        idx, lo, hi, depth = item
        with lock:
            if started[idx] == 0.0:
                started[idx] = time.perf_counter()
            t_start = started[idx]
        ctx = ctxs.get(idx)
        if ctx is None:
            ctx = ctxs[idx] = _Context(net, X[idx], int(Y[idx]), spec)
        stack = [(Box(lo, hi), depth)]
        local_nodes = 0
        local_status = 0
        cex = None
        while stack:
            if status[idx] & _CE_BIT:
                break
            box, d = stack.pop()
            over_time = spec.timeout is not None and time.perf_counter() > t_start + spec.timeout
            over_nodes = spec.max_nodes is not None and nodes[idx] + local_nodes >= spec.max_nodes
            if over_time or over_nodes:
                local_status |= _UNDECIDED_BIT
                continue
            local_nodes += 1
            kind, payload = _expand(ctx, box, d)
            if kind == COUNTEREXAMPLE:
                cex = payload
                local_status |= _CE_BIT
                break
            if kind == UNDECIDED:
                local_status |= _UNDECIDED_BIT
            elif kind == "split":
                a, b = payload
                stack.append((b, d + 1))
                stack.append((a, d + 1))
                if idle.value > 0 and len(stack) > 1:
                    half = len(stack) // 2
                    give, stack = stack[:half], stack[half:]
                    with lock:
                        outstanding[idx] += len(give)
                    for bx, dd in give:
                        tasks.put((idx, bx.lo, bx.hi, dd))
        with lock:
            nodes[idx] += local_nodes
            if cex is not None and not status[idx] & _CE_BIT:
                ce[idx] = cex
            status[idx] |= local_status
            outstanding[idx] -= 1
            finished = outstanding[idx] == 0
        if finished:
            results.put(idx)


def _shared_array(ctx, typecode, n, shape=None):
    arr = ctx.RawArray(typecode, int(np.prod(shape)) if shape else n)
    np_arr = np.frombuffer(arr, dtype={"d": F64, "i": np.int32, "f": F32}[typecode])
    return np_arr.reshape(shape) if shape else np_arr


def parallel_verify(net: Network, data: Dataset | tuple, spec: RobustnessSpec) -> VerdictReport:
    """Verify every input; ``spec.workers > 1`` fans the bisection trees out
    over processes with dynamic work sharing."""
    X, Y = (data.X, data.y) if isinstance(data, Dataset) else data
    X = np.atleast_2d(np.asarray(X, F32))
    Y = np.asarray(Y)
    t0 = time.perf_counter()
    if spec.workers == 1 or len(X) == 0:
        verdicts = [verify_input(net, x, y, spec, i) for i, (x, y) in enumerate(zip(X, Y))]
        return VerdictReport(verdicts, epsilon=spec.epsilon, wall=time.perf_counter() - t0)
    return _parallel(net, X, Y, spec, t0)


def _parallel(net, X, Y, spec, t0):
    n = len(X)
    ctx = mp.get_context("fork")
    pred = np.argmax(forward(net, X), axis=-1)
    mis = pred != Y
    g = _G
    g.clear()
    g.update(net=net, X=X, Y=Y, spec=spec, tasks=ctx.Queue(), results=ctx.Queue(),
             lock=ctx.Lock(), idle=ctx.Value("i", 0),
             outstanding=_shared_array(ctx, "i", n), status=_shared_array(ctx, "i", n),
             nodes=_shared_array(ctx, "i", n), started=_shared_array(ctx, "d", n),
             ce=_shared_array(ctx, "f", n, (n, X.shape[1])))
    todo = [i for i in range(n) if not mis[i]]
    for i in todo:
        g["outstanding"][i] = 1
    procs = [ctx.Process(target=_worker, args=(w,), daemon=True) for w in range(spec.workers)]
    for p in procs:
        p.start()
    done_at = np.zeros(n)
    try:
        for i in todo:
            box = _root_box(X[i], spec)
            g["tasks"].put((i, box.lo, box.hi, 0))
        remaining = len(todo)
        while remaining:
            try:
                i = g["results"].get(timeout=1.0)
            except queue.Empty:
                if not all(p.is_alive() for p in procs):
                    raise RuntimeError("verification worker died")
                continue
            done_at[i] = time.perf_counter()
            remaining -= 1
    finally:
        for _ in procs:
            g["tasks"].put(None)
        for p in procs:
            p.join(timeout=5)
            if p.is_alive():
                p.terminate()
    verdicts = []
    for i in range(n):
        if mis[i]:
            verdicts.append(InputVerdict(i, MISCLASSIFIED, 0, 0.0, X[i].copy(),
                                         "clean input misclassified"))
            continue
        st = int(g["status"][i])
        ms = 1e3 * max(done_at[i] - g["started"][i], 0.0)
        nn = int(g["nodes"][i])
        if st & _CE_BIT:
            verdicts.append(InputVerdict(i, COUNTEREXAMPLE, nn, ms, g["ce"][i].copy(), "confirmed"))
        elif st & _UNDECIDED_BIT:
            verdicts.append(InputVerdict(i, UNDECIDED, nn, ms, None, "budget"))
        else:
            verdicts.append(InputVerdict(i, VERIFIED, nn, ms))
    g.clear()
    return VerdictReport(verdicts, epsilon=spec.epsilon, wall=time.perf_counter() - t0)


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity")
               else os.cpu_count() or 1)


# -- metrics ------------------------------------------------------------------------------

def pgd_unbroken(net: Network, X, Y, cfg: AttackConfig, domain: InputDomain = UNIT_DOMAIN,
                 chunk: int = 500) -> np.ndarray:
    """Mask of inputs that are correctly classified and survive every PGD restart."""
    X = np.atleast_2d(np.asarray(X, F32))
    Y = np.asarray(Y)
    ok = np.argmax(forward(net, X), axis=-1) == Y
    if cfg.epsilon == 0:
        return ok
    rng = make_rng(cfg.seed)
    for _ in range(cfg.restarts):
        for s in range(0, len(X), chunk):
            sl = slice(s, s + chunk)
            _, _, found, _ = pgd_batch(net, X[sl], Y[sl], cfg.epsilon, cfg.pgd_steps,
                                       cfg.pgd_step, rng=rng, domain=domain,
                                       random_start=cfg.random_start)
            ok[sl] &= ~found
    return ok


def metrics(net: Network, data: Dataset, eps: float, attack_cfg: AttackConfig | None = None,
            spec: RobustnessSpec | None = None, era: bool = True) -> VerdictReport:
    """ACC, ERA (PGD) and VRA (bisection verifier) on ``data``."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    if spec is None:
        spec = RobustnessSpec(eps, data.domain)
    elif spec.epsilon != eps:
        raise ValueError("spec epsilon does not match eps")
    report = parallel_verify(net, data, spec)
    correct = net.predict(data.X) == data.y
    verified = np.array([v.verified for v in report.verdicts])
    report.acc = float(np.mean(correct))
    report.vra = float(np.mean(verified & correct))
    if era:
        cfg = attack_cfg or AttackConfig(kind="pgd", epsilon=eps)
        unbroken = pgd_unbroken(net, data.X, data.y, cfg, data.domain)
        report.era = float(np.mean(unbroken))
    return report
