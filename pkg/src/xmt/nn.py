"""Dense layers, softmax cross-entropy and plain SGD, with hand-written gradients.

Everything here is float64 and batch-major: a batch is an ``(n, features)``
array and a layer maps it to ``(n, out_dim)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)

LOG_FLOOR = 1e-12


@dataclass
class DenseLayer:
    """Fully-connected layer ``activation(x @ W.T + b)``.

    ``weights`` has shape ``(out_dim, in_dim)``. ``version`` is bumped on every
    in-place update so caches from earlier forwards can be rejected.
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: str = RELU
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"inconsistent layer shapes: weights {self.weights.shape}, bias {self.bias.shape}"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


class LayerCache(NamedTuple):
    layer_id: int
    version: int
    inputs: np.ndarray
    pre: np.ndarray


class LayerGrads(NamedTuple):
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.0005
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.weight_decay >= 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def init_layer(in_dim: int, out_dim: int, activation: str, rng: np.random.Generator) -> DenseLayer:
    """Glorot-uniform weights, zero bias."""
    if in_dim < 1 or out_dim < 1:
        raise ValueError(f"layer dimensions must be positive, got ({in_dim}, {out_dim})")
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    weights = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return DenseLayer(weights, np.zeros(out_dim), activation)


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected a batch matrix, got array of shape {x.shape}")
    return x


def forward(layer: DenseLayer, inputs) -> tuple[np.ndarray, LayerCache]:
    x = _as_batch(inputs)
    if x.shape[1] != layer.in_dim:
        raise ValueError(f"input has {x.shape[1]} columns, layer expects {layer.in_dim}")
    pre = x @ layer.weights.T + layer.bias
    out = np.maximum(pre, 0.0) if layer.activation == RELU else pre
    return out, LayerCache(id(layer), layer.version, x, pre)


def backward(layer: DenseLayer, grad_output, cache: LayerCache):
    """Return ``(grad_input, LayerGrads)`` for the forward call that made ``cache``."""
    if cache.layer_id != id(layer) or cache.version != layer.version:
        raise ValueError("cache does not belong to the current state of this layer")
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != cache.pre.shape:
        raise ValueError(f"grad_output shape {g.shape} != output shape {cache.pre.shape}")
    if layer.activation == RELU:
        g = g * (cache.pre > 0)
    grad_w = g.T @ cache.inputs
    grad_b = g.sum(axis=0)
    grad_in = g @ layer.weights
    return grad_in, LayerGrads(grad_w, grad_b)


def softmax(logits) -> np.ndarray:
    z = _as_batch(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    z = _as_batch(logits)
    labels = np.asarray(labels)
    n, c = z.shape
    if labels.shape != (n,):
        raise ValueError(f"need {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    p = softmax(z)
    rows = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(p[rows, labels], LOG_FLOOR))))
    grad = p.copy()
    grad[rows, labels] -= 1.0
    return loss, grad / n


def sgd_step(layers: Sequence[DenseLayer], grads: Sequence[LayerGrads], cfg: SgdConfig) -> None:
    """In-place ``p <- p - lr * (grad + weight_decay * p)`` on every parameter."""
    if len(layers) != len(grads):
        raise ValueError(f"{len(layers)} layers but {len(grads)} gradients")
    for layer, g in zip(layers, grads):
        if g.weights.shape != layer.weights.shape or g.bias.shape != layer.bias.shape:
            raise ValueError("gradient shape does not match layer")
    lr, wd = cfg.learning_rate, cfg.weight_decay
    for layer, g in zip(layers, grads):
        layer.weights -= lr * (g.weights + wd * layer.weights)
        layer.bias -= lr * (g.bias + wd * layer.bias)
        layer.version += 1
