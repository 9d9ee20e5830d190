"""The shared classifier: affine -> batch norm -> ReLU blocks ending in a softmax.

Forward and backward passes are written out by hand in float64. The
backbone that produces the input features is external; this network is the
only trainable component.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    InvalidSizes,
    ShapeMismatch,
    SingleSampleTrainingBatch,
    StaleCache,
)

DEFAULT_HIDDEN = (512, 256)
DEFAULT_LR = 0.001
BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON


@dataclass
class Layer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray
    norm: Optional[BatchNorm] = None

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Network:
    layers: List[Layer]
    # bumped by every optimizer step so stale caches can be detected
    version: int = 0

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def layer_sizes(self) -> List[int]:
        return [layer.out_dim for layer in self.layers]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> List[Tuple[str, np.ndarray]]:
        """Trainable arrays in a fixed order; gradients use the same order."""
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"W{i}", layer.weights))
            out.append((f"b{i}", layer.bias))
            if layer.norm is not None:
                out.append((f"gamma{i}", layer.norm.gamma))
                out.append((f"beta{i}", layer.norm.beta))
        return out

    def copy(self) -> "Network":
        layers = []
        for layer in self.layers:
            norm = None
            if layer.norm is not None:
                n = layer.norm
                norm = BatchNorm(
                    n.gamma.copy(), n.beta.copy(), n.running_mean.copy(),
                    n.running_var.copy(), n.momentum, n.epsilon,
                )
            layers.append(Layer(layer.weights.copy(), layer.bias.copy(), norm))
        return Network(layers, self.version)


def init_network(
    input_dim: int,
    layer_sizes: Sequence[int],
    seed: int = 0,
    batch_norm: bool = True,
) -> Network:
    """Glorot-uniform weights, zero biases, identity batch-norm on hidden layers."""
    sizes = [int(s) for s in layer_sizes]
    if input_dim < 1 or not sizes or min(sizes) < 1:
        raise InvalidSizes(f"bad network sizes: input {input_dim}, layers {sizes}")
    if sizes[-1] < 2:
        raise InvalidSizes("the output layer needs at least two classes")
    rng = np.random.default_rng(seed)
    layers = []
    fan_in = input_dim
    for i, fan_out in enumerate(sizes):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        norm = None
        if batch_norm and i < len(sizes) - 1:
            norm = BatchNorm(
                np.ones(fan_out), np.zeros(fan_out), np.zeros(fan_out), np.ones(fan_out)
            )
        layers.append(Layer(w, np.zeros(fan_out), norm))
        fan_in = fan_out
    return Network(layers)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    cache: "Cache"


@dataclass
class Cache:
    version: int
    training: bool
    inputs: List[np.ndarray] = field(default_factory=list)
    # per layer: (xhat, inv_std) for norm layers, else None
    norm: List[Optional[Tuple[np.ndarray, np.ndarray]]] = field(default_factory=list)
    relu_mask: List[Optional[np.ndarray]] = field(default_factory=list)


def forward(
    net: Network, x: np.ndarray, training: bool = False, update_stats: bool = True
) -> ForwardResult:
    """Run the classifier on a batch.

    In training mode batch-norm uses the batch's own statistics and, unless
    ``update_stats`` is false, folds them into the running averages.
    Inference mode uses the running averages, so each output row depends
    only on its input row.
    """
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != net.input_dim:
        raise ShapeMismatch(f"expected (N, {net.input_dim}) input, got {h.shape}")
    if h.shape[0] < 1:
        raise ShapeMismatch("empty input batch")
    has_norm = any(layer.norm is not None for layer in net.layers)
    if training and has_norm and h.shape[0] < 2:
        raise SingleSampleTrainingBatch("batch-norm training needs at least two rows")

    cache = Cache(net.version, training)
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        cache.inputs.append(h)
        z = h @ layer.weights.T + layer.bias
        bn = layer.norm
        if bn is not None:
            if training:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                if update_stats:
                    n = z.shape[0]
                    bn.running_mean *= 1.0 - bn.momentum
                    bn.running_mean += bn.momentum * mu
                    bn.running_var *= 1.0 - bn.momentum
                    bn.running_var += bn.momentum * var * n / (n - 1)
            else:
                mu, var = bn.running_mean, bn.running_var
            inv_std = 1.0 / np.sqrt(var + bn.epsilon)
            xhat = (z - mu) * inv_std
            cache.norm.append((xhat, inv_std))
            z = xhat * bn.gamma + bn.beta
        else:
            cache.norm.append(None)
        if i < last:
            mask = z > 0
            cache.relu_mask.append(mask)
            h = z * mask
        else:
            cache.relu_mask.append(None)
            h = z
    return ForwardResult(h, softmax(h), cache)


def backward(net: Network, cache: Cache, grad_logits: np.ndarray):
    """Reverse pass from a gradient w.r.t. the logits.

    Returns ``(grads, grad_input)`` with ``grads`` aligned to
    ``net.parameters()``.
    """
    if cache.version != net.version:
        raise StaleCache("parameters changed since this forward pass")
    g = np.asarray(grad_logits, dtype=np.float64)
    per_layer = []
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        mask = cache.relu_mask[i]
        if mask is not None:
            g = g * mask
        bn = layer.norm
        g_gamma = g_beta = None
        if bn is not None:
            xhat, inv_std = cache.norm[i]
            g_gamma = np.sum(g * xhat, axis=0)
            g_beta = np.sum(g, axis=0)
            g_xhat = g * bn.gamma
            if cache.training:
                n = g.shape[0]
                g = (inv_std / n) * (
                    n * g_xhat
                    - g_xhat.sum(axis=0)
                    - xhat * np.sum(g_xhat * xhat, axis=0)
                )
            else:
                g = g_xhat * inv_std
        h = cache.inputs[i]
        g_w = g.T @ h
        g_b = g.sum(axis=0)
        per_layer.append((g_w, g_b, g_gamma, g_beta))
        g = g @ layer.weights
    grads = []
    for (g_w, g_b, g_gamma, g_beta), layer in zip(reversed(per_layer), net.layers):
        grads.append(g_w)
        grads.append(g_b)
        if layer.norm is not None:
            grads.append(g_gamma)
            grads.append(g_beta)
    return grads, g


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str = "sgd_momentum"
    learning_rate: float = DEFAULT_LR
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")


def optimizer_step(net: Network, grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    """Update ``net`` in place and advance ``state``."""
    params = [p for _, p in net.parameters()]
    if len(grads) != len(params):
        raise ShapeMismatch(f"{len(grads)} gradients for {len(params)} parameters")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeMismatch(f"gradient shape {np.shape(g)} vs parameter {p.shape}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        if state.kind == "adam":
            state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    lr = state.learning_rate
    if state.kind == "sgd_momentum":
        for p, g, buf in zip(params, grads, state.m):
            buf *= state.momentum
            buf += g
            p -= lr * buf
    else:
        b1, b2 = state.beta1, state.beta2
        c1 = 1.0 - b1 ** state.step
        c2 = 1.0 - b2 ** state.step
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    net.version += 1


# ---------------------------------------------------------------------------
# checkpoint format:
#   b"DSGK1", u32 layer count, then per layer u32 in, u32 out, u32 flags
#   (bit 0 = batch norm) followed by that layer's f64 arrays, row-major:
#   weights, bias[, gamma, beta, running_mean, running_var, momentum, epsilon]

MAGIC = b"DSGK1"
FLAG_NORM = 1


def checkpoint_bytes(net: Network) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(net.layers))]
    for layer in net.layers:
        flags = FLAG_NORM if layer.norm is not None else 0
        parts.append(struct.pack("<III", layer.in_dim, layer.out_dim, flags))
        arrays = [layer.weights, layer.bias]
        if layer.norm is not None:
            n = layer.norm
            arrays += [
                n.gamma, n.beta, n.running_mean, n.running_var,
                np.array([n.momentum]), np.array([n.epsilon]),
            ]
        for a in arrays:
            parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def checkpoint_hash(net: Network) -> str:
    return hashlib.sha256(checkpoint_bytes(net)).hexdigest()


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def load_checkpoint(path) -> Network:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a DSGK1 checkpoint")
    off = len(MAGIC)
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4

    def take(n):
        nonlocal off
        a = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        return a

    layers = []
    for _ in range(count):
        d_in, d_out, flags = struct.unpack_from("<III", buf, off)
        off += 12
        w = take(d_in * d_out).reshape(d_out, d_in)
        b = take(d_out)
        norm = None
        if flags & FLAG_NORM:
            gamma, beta, rm, rv = take(d_out), take(d_out), take(d_out), take(d_out)
            momentum, eps = take(2)
            norm = BatchNorm(gamma, beta, rm, rv, float(momentum), float(eps))
        layers.append(Layer(w, b, norm))
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return Network(layers)
