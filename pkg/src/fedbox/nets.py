"""Minimal dense-network substrate: float64 arrays, manual backprop, losses, optimizers.

Everything downstream (the auto-encoder, the remap head, and the surrogate model
that later gets sealed) is built from plain fully-connected layers defined here.
All math is float64: the zeroth-order estimators divide tiny loss differences by
2*rho, and 32-bit rounding would dominate the bias we test for.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Array = np.ndarray

ACTIVATIONS = ("relu", "tanh", "identity")


class ShapeError(ValueError):
    """A tensor dimension does not match the operation's contract."""


def _check_width(name: str, got: int, want: int) -> None:
    if got != want:
        raise ShapeError(f"{name}: got width {got}, expected {want}")


@dataclass
class Layer:
    weight: Array  # [in_dim, out_dim]
    bias: Array  # [out_dim]
    activation: str = "identity"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class DenseNet:
    layers: list[Layer]

    def __post_init__(self) -> None:
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(
                    f"layer chain broken: out_dim {a.out_dim} feeds in_dim {b.in_dim}"
                )
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim,) + tuple(l.out_dim for l in self.layers)

    def param_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


def init_dense(dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> DenseNet:
    """Glorot-uniform weights, zero biases."""
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for d_in, d_out, act in zip(dims, dims[1:], activations):
        bound = np.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-bound, bound, size=(d_in, d_out))
        layers.append(Layer(w, np.zeros(d_out), act))
    return DenseNet(layers)


def _apply_activation(pre: Array, act: str) -> Array:
    if act == "relu":
        return np.maximum(pre, 0.0)
    if act == "tanh":
        return np.tanh(pre)
    return pre


def forward(net: DenseNet, batch: Array) -> Array:
    """Forward pass of a [B x in_dim] batch; deterministic."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {batch.shape}")
    _check_width("forward input", batch.shape[1], net.input_dim)
    h = batch
    for layer in net.layers:
        h = _apply_activation(h @ layer.weight + layer.bias, layer.activation)
    return h


def _forward_trace(net: DenseNet, batch: Array) -> tuple[Array, list[Array], list[Array]]:
    """Forward pass keeping per-layer pre-activations and outputs for backprop."""
    pres: list[Array] = []
    posts: list[Array] = [batch]
    h = batch
    for layer in net.layers:
        pre = h @ layer.weight + layer.bias
        h = _apply_activation(pre, layer.activation)
        pres.append(pre)
        posts.append(h)
    return h, pres, posts


@dataclass
class GradBundle:
    weight_grads: list[Array]
    bias_grads: list[Array]
    input_grad: Array

    def scaled(self, factor: float) -> "GradBundle":
        return GradBundle(
            [g * factor for g in self.weight_grads],
            [g * factor for g in self.bias_grads],
            self.input_grad * factor,
        )


def backward(net: DenseNet, batch: Array, upstream_grad: Array) -> GradBundle:
    """Exact reverse-mode gradients of <forward(net, batch), upstream_grad>.

    The scalar being differentiated is the elementwise dot product of the
    forward output with ``upstream_grad`` (summed over the batch), so callers
    that want a mean-over-batch objective pass an already-scaled upstream.
    """
    batch = np.asarray(batch, dtype=np.float64)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    _check_width("backward input", batch.shape[1], net.input_dim)
    if upstream_grad.shape != (batch.shape[0], net.output_dim):
        raise ShapeError(
            f"upstream grad shape {upstream_grad.shape}, expected "
            f"{(batch.shape[0], net.output_dim)}"
        )
    _, pres, posts = _forward_trace(net, batch)
    weight_grads: list[Array] = [None] * len(net.layers)  # type: ignore[list-item]
    bias_grads: list[Array] = [None] * len(net.layers)  # type: ignore[list-item]
    g = upstream_grad
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        if layer.activation == "relu":
            g_pre = g * (pres[k] > 0.0)
        elif layer.activation == "tanh":
            g_pre = g * (1.0 - posts[k + 1] ** 2)
        else:
            g_pre = g
        weight_grads[k] = posts[k].T @ g_pre
        bias_grads[k] = g_pre.sum(axis=0)
        g = g_pre @ layer.weight.T
    return GradBundle(weight_grads, bias_grads, g)


def mse_loss(pred: Array, target: Array) -> tuple[float, Array]:
    """Mean squared error over all elements and its gradient w.r.t. pred."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff**2))
    grad = 2.0 * diff / diff.size
    return loss, grad


def softmax(logits: Array) -> Array:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_per_row(logits: Array, labels: Array) -> Array:
    """Per-row negative log softmax probability of the true class."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(
            f"label out of range: labels must lie in [0, {n_classes})"
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return log_z - shifted[np.arange(len(labels)), labels]


def softmax_cross_entropy(logits: Array, labels: Array) -> tuple[float, Array]:
    """Mean cross-entropy and its gradient (softmax - onehot) / B."""
    losses = cross_entropy_per_row(logits, labels)
    b = logits.shape[0]
    grad = softmax(np.asarray(logits, dtype=np.float64))
    grad[np.arange(b), labels] -= 1.0
    return float(losses.mean()), grad / b


def sgd_step(net: DenseNet, grads: GradBundle, lr: float) -> None:
    _check_grad_shapes(net, grads)
    for layer, gw, gb in zip(net.layers, grads.weight_grads, grads.bias_grads):
        layer.weight -= lr * gw
        layer.bias -= lr * gb


@dataclass
class AdamState:
    m_w: list[Array]
    v_w: list[Array]
    m_b: list[Array]
    v_b: list[Array]
    t: int = 0

    @classmethod
    def for_net(cls, net: DenseNet) -> "AdamState":
        return cls(
            [np.zeros_like(l.weight) for l in net.layers],
            [np.zeros_like(l.weight) for l in net.layers],
            [np.zeros_like(l.bias) for l in net.layers],
            [np.zeros_like(l.bias) for l in net.layers],
        )


def adam_step(
    net: DenseNet,
    grads: GradBundle,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update, in place."""
    _check_grad_shapes(net, grads)
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for k, layer in enumerate(net.layers):
        for param, g, m, v in (
            (layer.weight, grads.weight_grads[k], state.m_w[k], state.v_w[k]),
            (layer.bias, grads.bias_grads[k], state.m_b[k], state.v_b[k]),
        ):
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            param -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _check_grad_shapes(net: DenseNet, grads: GradBundle) -> None:
    for layer, gw, gb in zip(net.layers, grads.weight_grads, grads.bias_grads):
        if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
            raise ShapeError(
                f"gradient shapes {gw.shape}/{gb.shape} do not match layer "
                f"{layer.weight.shape}/{layer.bias.shape}"
            )


def get_flat_params(net: DenseNet) -> Array:
    """All parameters as one float64 vector (layer order, weight then bias)."""
    parts = []
    for layer in net.layers:
        parts.append(layer.weight.ravel())
        parts.append(layer.bias.ravel())
    return np.concatenate(parts)


def set_flat_params(net: DenseNet, flat: Array) -> None:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size != net.param_count():
        raise ShapeError(
            f"flat vector has {flat.size} entries, net has {net.param_count()} params"
        )
    pos = 0
    for layer in net.layers:
        n = layer.weight.size
        layer.weight[...] = flat[pos : pos + n].reshape(layer.weight.shape)
        pos += n
        n = layer.bias.size
        layer.bias[...] = flat[pos : pos + n]
        pos += n


def serialize_params(net: DenseNet) -> bytes:
    """Wire/checkpoint format: little-endian layer-dims header + float64 stream."""
    dims = net.dims
    header = struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    return header + get_flat_params(net).astype("<f8").tobytes()


def deserialize_params(blob: bytes) -> tuple[tuple[int, ...], Array]:
    """Split a serialized stream back into (dims, flat parameter vector)."""
    (n_dims,) = struct.unpack_from("<I", blob, 0)
    dims = struct.unpack_from(f"<{n_dims}I", blob, 4)
    flat = np.frombuffer(blob, dtype="<f8", offset=4 + 4 * n_dims).astype(np.float64)
    return dims, flat


def load_params(net: DenseNet, blob: bytes) -> None:
    """Load a serialized parameter stream into an architecture-matching net."""
    dims, flat = deserialize_params(blob)
    if dims != net.dims:
        raise ShapeError(f"checkpoint dims {dims} do not match net dims {net.dims}")
    set_flat_params(net, flat)
