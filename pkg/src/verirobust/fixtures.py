"""Hand-built networks with known behaviour, used by tests, scripts and benchmarks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Network
from .numerics import F32


@dataclass
class ShelfFixture:
    net: Network
    x: np.ndarray
    y: int
    eps: float


def shelf_network(width: float = 1e-6) -> ShelfFixture:
    """1-D net that is correct on [0.5, 1 - width/2) but flips on a sliver at 1.

    hidden: relu(x), K * relu(x - (1 - width)) with K = 2 / width
    logits: z0 = 0, z1 = 1 - 2 relu(x) + K relu(x - (1 - width))

    z1 reaches +1 at x = 1.  Around x = 0.9 with eps = 0.3 the cross-entropy
    gradient points away from the sliver, so PGD (even with many random
    restarts) practically never lands on it, while the symbolic bounds of a
    region touching x = 1 expose it immediately.
    """
    k = 2.0 / width
    net = Network([[[1.0], [k]], [[0.0, 0.0], [-2.0, 1.0]]],
                  [[0.0, -k * (1.0 - width)], [0.0, 1.0]])
    return ShelfFixture(net, np.array([0.9], F32), 0, 0.3)


def comb_network(dim: int = 1, breakpoints=(0.3, 0.7), scale: float = 4.0,
                 margin: float = 0.3) -> Network:
    """Two-class net whose class-0 margin is exactly ``margin`` everywhere.

    logit1 sums scale * (relu(x_i - c) - relu(x_i - c)) over pairs of
    duplicate neurons, so it is identically zero, but the relaxation of a
    crossing neuron over a box [a, b] leaves a gap of
    scale * (b - c)(c - a) / (b - a) per pair.  Large boxes therefore fail
    to verify and need bisection; the depth grows with ``scale``.
    """
    rows, bias = [], []
    for i in range(dim):
        for c in breakpoints:
            e = np.zeros(dim)
            e[i] = 1.0
            rows += [e, e]
            bias += [-c, -c]
    h = len(rows)
    out = np.zeros((2, h))
    out[1, 0::2] = scale
    out[1, 1::2] = -scale
    return Network([np.array(rows), out], [np.array(bias), np.array([margin, 0.0])])


def hard_network() -> tuple[Network, np.ndarray, int, float]:
    """1-D comb net over [0, 1] that needs at least two levels of bisection."""
    net = comb_network(1, (0.3, 0.7), scale=4.0, margin=0.3)
    return net, np.array([0.5], F32), 0, 0.5
