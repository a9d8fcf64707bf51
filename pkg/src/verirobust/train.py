"""Training loops: regular, PGD-adversarial, full verifiable, and mixed.

The mixed scheme evaluates the verifiable robust loss on only k' randomly
drawn samples per batch and blends it with the regular loss of the whole
batch, ``(1 - alpha) * L_reg + alpha * L_rob``.  alpha moves by +-0.05 after
every epoch depending on the clean accuracy of the sampled points.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .analysis import robust_loss_grad
from .attack import AttackConfig, pgd_batch
from .data_io import Dataset
from .model import Network, loss_and_grads
from .numerics import F32, spawn_rngs

log = logging.getLogger(__name__)

SCHEMES = ("regular", "adversarial", "verifiable", "mixtrain")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    scheme: str = "mixtrain"
    epochs: int = 20
    batch_size: int = 50
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_decay: float = 0.6
    decay_every: int = 5
    momentum: float = 0.0
    epsilon: float = 0.1
    eps_start: float = 0.01
    warmup_epochs: int = 10
    k: int | None = None             # robust samples per epoch; None means one per batch
    alpha0: float = 0.8
    acc_target: float = 0.9
    alpha_step: float = 0.05
    seed: int = 0
    attack: AttackConfig | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if self.k is not None and self.k < 0:
            raise ValueError("k must be non-negative")
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)

    @classmethod
    def mnist_preset(cls, **kw) -> "TrainConfig":
        """Adam, lr 1e-3 decayed x0.6 every 5 epochs, eps warm-up from 0.01 over 10 epochs."""
        base = dict(optimizer="adam", lr=1e-3, lr_decay=0.6, decay_every=5,
                    eps_start=0.01, warmup_epochs=10, alpha0=0.8, batch_size=50)
        base.update(kw)
        return cls(**base)

    @classmethod
    def cifar_preset(cls, **kw) -> "TrainConfig":
        base = dict(optimizer="sgd", lr=0.05, lr_decay=0.6, decay_every=5,
                    eps_start=0.001, warmup_epochs=10, alpha0=0.5, batch_size=50)
        base.update(kw)
        return cls(**base)

    def per_batch_samples(self, n: int) -> int:
        """k' = round(k / (n / m)), with k' = 0 promoted to 1."""
        m = min(self.batch_size, n)
        if self.k is None:
            return 1
        kp = int(round(self.k * m / n))
        if kp == 0:
            log.warning("k=%d over %d batches rounds to k'=0; using k'=1", self.k, n // m)
            kp = 1
        return min(kp, m)

    def as_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class EpochReport:
    epoch: int
    epsilon: float
    alpha: float | None
    lr: float
    regular_loss: float
    robust_loss: float | None
    sampled_acc: float | None
    batch_time: float

    CSV_FIELDS = ("epoch", "epsilon", "alpha", "lr", "regular_loss", "robust_loss",
                  "sampled_acc", "batch_time")

    def row(self) -> list:
        return [getattr(self, f) for f in self.CSV_FIELDS]


@dataclass
class TrainResult:
    network: Network
    history: list[EpochReport] = field(default_factory=list)
    per_batch_samples: int | None = None


# -- schedules -------------------------------------------------------------------

def epsilon_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp from eps_start to the target, reached exactly at warmup_epochs."""
    target = cfg.epsilon
    start = min(cfg.eps_start, target)
    if cfg.warmup_epochs <= 0 or epoch >= cfg.warmup_epochs:
        return target
    return start + (target - start) * epoch / cfg.warmup_epochs


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if cfg.decay_every <= 0:
        return cfg.lr
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)


@dataclass
class MixSchedule:
    alpha0: float
    acc_target: float
    step: float = 0.05
    alpha: float = field(init=False)

    def __post_init__(self):
        self.alpha = float(np.clip(self.alpha0, 0.0, 1.0))

    def update(self, acc: float) -> float:
        delta = self.step if acc > self.acc_target else -self.step
        self.alpha = float(np.clip(round(self.alpha + delta, 10), 0.0, 1.0))
        return self.alpha


# -- optimizers ----------------------------------------------------------------------

class SGD:
    def __init__(self, params, momentum=0.0):
        self.params = params
        self.momentum = momentum
        self.vel = [np.zeros_like(p) for p in params]

    def step(self, grads, lr):
        for p, g, v in zip(self.params, grads, self.vel):
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p -= (lr * g).astype(p.dtype)


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.astype(p.dtype)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def make_optimizer(net: Network, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(net.params())
    return SGD(net.params(), cfg.momentum)


# -- loops ------------------------------------------------------------------------

def _check_finite(loss: float, epoch: int):
    if not np.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss} in epoch {epoch}")


def _batches(n: int, m: int, rng):
    perm = rng.permutation(n)
    return [perm[i:i + m] for i in range(0, n, m)]


def _robust_term(net, X, Y, eps, data: Dataset, weight: float):
    """Mean robust loss over the given samples and its scaled gradient."""
    n = len(Y)
    if eps == 0:
        # degenerate box: the bounds collapse to the forward pass
        loss, grads, _, _ = loss_and_grads(net, X, Y)
        return loss, grads.scaled(weight) if weight != 1 else grads
    losses, grads = robust_loss_grad(net, X, Y, eps, data.domain,
                                     sample_weights=np.full(n, weight / n, F32))
    return float(np.mean(losses)), grads


def mixed_loss(net: Network, X, Y, pick, alpha: float, eps: float, data: Dataset):
    """(1 - alpha) * regular CE over the batch + alpha * robust loss over ``X[pick]``.

    Returns (mixed, regular, robust or None, gradients of mixed).
    """
    reg, g_reg, _, _ = loss_and_grads(net, X, Y)
    if alpha == 0:
        return reg, reg, None, g_reg
    rob, g_rob = _robust_term(net, X[pick], Y[pick], eps, data, 1.0)
    mixed = (1 - alpha) * reg + alpha * rob
    if alpha == 1:
        return mixed, reg, rob, g_rob
    return mixed, reg, rob, g_reg.scaled(1 - alpha) + g_rob.scaled(alpha)


def train(net: Network, data: Dataset, cfg: TrainConfig) -> TrainResult:
    net = net.copy()
    n = len(data)
    if n == 0:
        raise ValueError("empty training set")
    shuffle_rng, sample_rng, attack_rng = spawn_rngs(cfg.seed, 3)
    opt = make_optimizer(net, cfg)
    kp = cfg.per_batch_samples(n) if cfg.scheme == "mixtrain" else None
    sched = MixSchedule(cfg.alpha0, cfg.acc_target, cfg.alpha_step) \
        if cfg.scheme == "mixtrain" else None
    atk = cfg.attack or AttackConfig(kind="pgd", epsilon=cfg.epsilon)
    history = []

    for epoch in range(cfg.epochs):
        eps = epsilon_at(epoch, cfg)
        lr = lr_at(epoch, cfg)
        reg_losses, rob_losses, sampled = [], [], []
        t_batches = 0.0
        batches = _batches(n, cfg.batch_size, shuffle_rng)
        for idx in batches:
            t0 = time.perf_counter()
            X, Y = data.X[idx], data.y[idx]
            if cfg.scheme == "regular":
                loss, grads, _, _ = loss_and_grads(net, X, Y)
                reg_losses.append(loss)
            elif cfg.scheme == "adversarial":
                if eps > 0:
                    X, _, _, _ = pgd_batch(net, X, Y, eps, atk.pgd_steps, atk.pgd_step,
                                           rng=attack_rng, domain=data.domain,
                                           random_start=atk.random_start)
                loss, grads, _, _ = loss_and_grads(net, X, Y)
                reg_losses.append(loss)
            elif cfg.scheme == "verifiable":
                loss, grads = _robust_term(net, X, Y, eps, data, 1.0)
                rob_losses.append(loss)
            else:
                alpha = sched.alpha
                pick = np.sort(sample_rng.choice(len(idx), size=min(kp, len(idx)), replace=False))
                sampled.append(idx[pick])
                loss, reg, rob, grads = mixed_loss(net, X, Y, pick, alpha, eps, data)
                reg_losses.append(reg)
                if rob is not None:
                    rob_losses.append(rob)
            _check_finite(loss, epoch)
            opt.step(grads.as_list(), lr)
            t_batches += time.perf_counter() - t0

        acc = None
        alpha_used = None
        if sched is not None:
            alpha_used = sched.alpha
            pts = np.concatenate(sampled)
            acc = float(np.mean(net.predict(data.X[pts]) == data.y[pts]))
            sched.update(acc)
        rep = EpochReport(
            epoch=epoch, epsilon=float(eps), alpha=alpha_used, lr=float(lr),
            regular_loss=float(np.mean(reg_losses)) if reg_losses else float("nan"),
            robust_loss=float(np.mean(rob_losses)) if rob_losses else None,
            sampled_acc=acc, batch_time=t_batches / len(batches))
        history.append(rep)
        log.info("epoch %d eps=%.4f alpha=%s reg=%.4f rob=%s acc=%s",
                 epoch, eps, alpha_used, rep.regular_loss, rep.robust_loss, acc)
    return TrainResult(net, history, kp)


def train_regular(net, data, cfg: TrainConfig) -> TrainResult:
    return train(net, data, _with_scheme(cfg, "regular"))


def train_adversarial(net, data, cfg: TrainConfig) -> TrainResult:
    return train(net, data, _with_scheme(cfg, "adversarial"))


def train_verifiable(net, data, cfg: TrainConfig) -> TrainResult:
    return train(net, data, _with_scheme(cfg, "verifiable"))


def train_mixtrain(net, data, cfg: TrainConfig) -> TrainResult:
    if cfg.k is not None and cfg.k < 1:
        raise ValueError("mixed training needs k >= 1")
    return train(net, data, _with_scheme(cfg, "mixtrain"))


def _with_scheme(cfg: TrainConfig, scheme: str) -> TrainConfig:
    if cfg.scheme == scheme:
        return cfg
    d = cfg.as_dict()
    d["scheme"] = scheme
    return TrainConfig(**d)


# -- diagnostics -------------------------------------------------------------------------

def robust_losses(net: Network, data: Dataset, eps: float, chunk: int = 100) -> np.ndarray:
    out = []
    for i in range(0, len(data), chunk):
        l, _ = robust_loss_grad(net, data.X[i:i + chunk], data.y[i:i + chunk], eps,
                                data.domain, need_grad=False)
        out.append(l)
    return np.concatenate(out) if out else np.zeros(0)


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov distance."""
    a, b = np.sort(a), np.sort(b)
    if len(a) == 0 or len(b) == 0:
        return 0.0
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / len(a)
    fb = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.max(np.abs(fa - fb)))


def subsample_robust_loss_distribution(net: Network, data: Dataset, k: int, eps: float,
                                       seed: int = 0, bins: int = 30,
                                       full: bool = True) -> dict:
    """Robust-loss histograms for k random training points and (optionally) all of them."""
    if k > len(data):
        raise ValueError("k exceeds dataset size")
    rng = spawn_rngs(seed, 1)[0]
    pick = np.sort(rng.choice(len(data), size=k, replace=False))
    sub = robust_losses(net, data.subset(pick), eps) if k else np.zeros(0)
    res = {"indices": pick, "sampled": sub}
    ref = robust_losses(net, data, eps) if full else sub
    if full:
        res["full"] = ref
    pool = np.concatenate([sub, ref]) if len(ref) or len(sub) else np.zeros(1)
    finite = pool[np.isfinite(pool)]
    hi = float(finite.max()) if len(finite) else 1.0
    edges = np.linspace(0.0, max(hi, 1e-12), bins + 1)
    res["edges"] = edges
    res["hist_sampled"] = np.histogram(sub, bins=edges)[0]
    if full:
        res["hist_full"] = np.histogram(ref, bins=edges)[0]
        res["ks"] = ks_statistic(sub, ref)
    return res
