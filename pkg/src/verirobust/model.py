"""Fully-connected ReLU classifier: forward/backward passes, losses, persistence."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import F32, F64, DimensionError, make_rng, mat32, vec32

MAGIC = b"VRNN"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Model file is corrupt, truncated, or has an unknown version."""


class TapeError(RuntimeError):
    """A gradient tape was consumed twice or does not match the network."""


@dataclass
class Network:
    """ReLU on every hidden layer, identity on the output layer.

    ``weights[i]`` has shape (out_i, in_i); ``biases[i]`` has shape (out_i,).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias per weight matrix and at least one layer")
        self.weights = [mat32(w) for w in self.weights]
        self.biases = [vec32(b) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape[0] != w.shape[0]:
                raise DimensionError(f"layer {i}: bias {b.shape} vs weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionError(
                    f"layer {i} expects {w.shape[1]} inputs, previous layer emits "
                    f"{self.weights[i - 1].shape[0]}")
        if self.weights[-1].shape[0] < 2:
            raise DimensionError("classifier needs at least 2 logits")

    @classmethod
    def init(cls, sizes, seed: int = 0) -> "Network":
        """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
        rng = make_rng(seed)
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(F32))
            bs.append(np.zeros(fan_out, dtype=F32))
        return cls(ws, bs)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "Network":
        return Network([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def predict(self, X) -> np.ndarray:
        return np.argmax(forward(self, X), axis=-1)


@dataclass
class GradientTape:
    """Per-layer inputs and pre-activations cached by one forward pass."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    batched: bool
    used: bool = field(default=False)


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def as_list(self) -> list[np.ndarray]:
        return [g for pair in zip(self.weights, self.biases) for g in pair]

    def scaled(self, c: float) -> "Gradients":
        return Gradients([c * g for g in self.weights], [c * g for g in self.biases])

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients([a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)])


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != net.input_dim or x.ndim not in (1, 2):
        raise DimensionError(f"network expects inputs of size {net.input_dim}, got {x.shape}")
    return x


def forward(net: Network, x, dtype=F32) -> np.ndarray:
    """Logits for one input (1-D) or a batch (2-D).

    ``dtype=np.float64`` runs a shadow pass in double precision.
    """
    h = _check_input(net, x).astype(dtype)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T.astype(dtype) + b.astype(dtype)
        if i < last:
            h = np.maximum(h, 0)
    return h


def forward_tape(net: Network, x, dtype=F32) -> tuple[np.ndarray, GradientTape]:
    x = _check_input(net, x)
    batched = x.ndim == 2
    h = np.atleast_2d(x).astype(dtype)
    inputs, preacts = [], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w.T.astype(dtype) + b.astype(dtype)
        preacts.append(z)
        h = np.maximum(z, 0) if i < last else z
    out = h if batched else h[0]
    return out, GradientTape(inputs, preacts, batched)


def backward(net: Network, tape: GradientTape, dlogits) -> tuple[Gradients, np.ndarray]:
    """Reverse pass: gradients w.r.t. every weight, bias and the input."""
    if tape.used:
        raise TapeError("gradient tape already consumed")
    if len(tape.inputs) != len(net.weights):
        raise TapeError("tape was recorded on a different network")
    tape.used = True
    dtype = tape.inputs[0].dtype
    g = np.atleast_2d(np.asarray(dlogits, dtype=dtype))
    last = len(net.weights) - 1
    gw: list[np.ndarray] = [None] * len(net.weights)
    gb: list[np.ndarray] = [None] * len(net.weights)
    for i in range(last, -1, -1):
        if i < last:
            g = g * (tape.preacts[i] > 0)
        gw[i] = g.T @ tape.inputs[i]
        gb[i] = g.sum(axis=0)
        g = g @ net.weights[i].astype(dtype)
    grad_x = g if tape.batched else g[0]
    return Gradients(gw, gb), grad_x


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, y):
    """Per-sample softmax cross-entropy (scalar for a single logit vector)."""
    logits = np.asarray(logits)
    lp = log_softmax(logits)
    if logits.ndim == 1:
        return -lp[int(y)]
    y = np.asarray(y)
    return -lp[np.arange(len(y)), y]


def cross_entropy_grad(logits, y) -> np.ndarray:
    """d(cross_entropy)/d(logits), per sample (softmax - onehot)."""
    logits = np.asarray(logits)
    p = softmax(logits)
    if logits.ndim == 1:
        p[int(y)] -= 1
    else:
        p[np.arange(len(y)), np.asarray(y)] -= 1
    return p


def loss_and_grads(net: Network, X, Y, weights=None, dtype=F32):
    """Mean cross-entropy over a batch, its parameter gradients and input gradients.

    ``weights`` optionally reweights samples (they should sum to 1).
    """
    logits, tape = forward_tape(net, X, dtype)
    logits = np.atleast_2d(logits)
    Y = np.atleast_1d(Y)
    n = len(Y)
    w = np.full(n, 1.0 / n, dtype=dtype) if weights is None else np.asarray(weights, dtype)
    losses = cross_entropy(logits, Y)
    dl = cross_entropy_grad(logits, Y) * w[:, None]
    grads, gx = backward(net, tape, dl)
    return float(np.sum(losses * w)), grads, gx, logits


# -- persistence -------------------------------------------------------------------

def save(net: Network, path) -> None:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(net.weights))]
    for w, b in zip(net.weights, net.biases):
        rows, cols = w.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def loads(data: bytes) -> Network:
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ModelFormatError("truncated model file")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != MAGIC:
        raise ModelFormatError("bad magic bytes, not a VRNN model file")
    version, n_layers = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    if n_layers == 0:
        raise ModelFormatError("model file declares zero layers")
    ws, bs = [], []
    for _ in range(n_layers):
        rows, cols = struct.unpack("<II", take(8))
        w = np.frombuffer(take(4 * rows * cols), dtype="<f4").reshape(rows, cols)
        b = np.frombuffer(take(4 * rows), dtype="<f4")
        ws.append(w.astype(F32))
        bs.append(b.astype(F32))
    if pos != len(data):
        raise ModelFormatError(f"{len(data) - pos} trailing bytes after last layer")
    try:
        return Network(ws, bs)
    except (DimensionError, ValueError) as exc:
        raise ModelFormatError(f"invalid layer shapes: {exc}") from exc


def load(path) -> Network:
    return loads(Path(path).read_bytes())


__all__ = [
    "F32", "F64", "Network", "GradientTape", "Gradients", "ModelFormatError", "TapeError",
    "forward", "forward_tape", "backward", "cross_entropy", "cross_entropy_grad",
    "softmax", "log_softmax", "loss_and_grads", "save", "load", "loads",
]
