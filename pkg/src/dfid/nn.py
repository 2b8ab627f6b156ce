"""Small dense-network engine: forward/backward, SGD/Adam, losses, gradient checks.

Everything runs in float64 on (n, d) batches. A 1-D input is treated as a batch
of one and the result is squeezed back.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from dfid.errors import NumericError, ShapeError

ACTIVATIONS = ("linear", "relu", "tanh")
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in _ACT_CODE:
            raise ShapeError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bad layer shapes W{self.weight.shape} b{self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseNet:
    layers: list[Layer]
    frozen_prefix_len: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        for i in range(len(self.layers) - 1):
            if self.layers[i].out_dim != self.layers[i + 1].in_dim:
                raise ShapeError(
                    f"layer {i} outputs {self.layers[i].out_dim} but layer {i + 1} "
                    f"expects {self.layers[i + 1].in_dim}"
                )
        if not 0 <= self.frozen_prefix_len <= len(self.layers):
            raise ShapeError("frozen_prefix_len out of range")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        """Trainable arrays, in layer order (W, b, W, b, ...)."""
        out = []
        for layer in self.layers[self.frozen_prefix_len:]:
            out.extend((layer.weight, layer.bias))
        return out

    def all_params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            self.frozen_prefix_len,
        )

    def __call__(self, x):
        return forward(self, x)


def init_net(
    sizes: Sequence[int],
    activations: Sequence[str],
    rng: np.random.Generator,
    frozen_prefix_len: int = 0,
) -> DenseNet:
    """Glorot-uniform weights, zero biases. ``sizes`` includes the input width."""
    if len(activations) != len(sizes) - 1:
        raise ShapeError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return DenseNet(layers, frozen_prefix_len)


def _activate(z, act):
    if act == "linear":
        return z
    if act == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z, a, act):
    if act == "linear":
        return np.ones_like(z)
    if act == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def _as_batch(net: DenseNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"expected input of width {net.in_dim}, got shape {x.shape}")
    return x, single


def forward(net: DenseNet, x) -> np.ndarray:
    out, _ = forward_cache(net, x)
    return out


def forward_cache(net: DenseNet, x):
    """Forward pass returning the output and the per-layer cache for backward()."""
    a, single = _as_batch(net, x)
    cache = [a]
    zs = []
    for i, layer in enumerate(net.layers):
        z = a @ layer.weight.T + layer.bias
        a = _activate(z, layer.activation)
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite activation", layer=i)
        zs.append(z)
        cache.append(a)
    out = a[0] if single else a
    return out, (single, cache, zs)


def backward(net: DenseNet, cache, grad_out):
    """Backpropagate ``grad_out`` (dL/d output).

    Returns ``(grads, grad_input)``. ``grads`` holds one ``(dW, db)`` per layer;
    frozen layers get ``None``.
    """
    single, acts, zs = cache
    g = np.asarray(grad_out, dtype=np.float64)
    if single:
        g = g[None, :]
    grads: list = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        g = g * _activate_grad(zs[i], acts[i + 1], layer.activation)
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", layer=i)
        if i >= net.frozen_prefix_len:
            grads[i] = (g.T @ acts[i], g.sum(axis=0))
        g = g @ layer.weight
    return grads, (g[0] if single else g)


def flat_grads(net: DenseNet, grads) -> list[np.ndarray]:
    """Gradients aligned with ``net.params()``."""
    out = []
    for g in grads[net.frozen_prefix_len:]:
        out.extend(g)
    return out


# --- losses -----------------------------------------------------------------


def euclidean_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def contrastive_loss(d, y, m):
    """(1 - Y) d^2 + Y max(0, m - d)^2. Works elementwise on arrays."""
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = (1.0 - y) * d * d + y * np.maximum(0.0, m - d) ** 2
    return float(out) if out.ndim == 0 else out


def contrastive_loss_grad(d, y, m):
    """d/dd of contrastive_loss."""
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return 2.0 * (1.0 - y) * d - 2.0 * y * np.maximum(0.0, m - d)


def hinge_sq_loss(d, m_h):
    """max(0, m_h - d)^2."""
    out = np.maximum(0.0, m_h - np.asarray(d, dtype=np.float64)) ** 2
    return float(out) if out.ndim == 0 else out


def hinge_sq_loss_grad(d, m_h):
    return -2.0 * np.maximum(0.0, m_h - np.asarray(d, dtype=np.float64))


def mse_loss(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        if self.inputs.shape[0] < 1:
            raise ShapeError("empty batch")
        if not np.all(np.isfinite(self.inputs)):
            raise ShapeError("batch contains non-finite inputs")
        if self.targets is not None:
            self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))


# A loss tail maps (network outputs, batch) -> (scalar loss, dL/d outputs).
LossTail = Callable[[np.ndarray, Batch], tuple[float, np.ndarray]]


def mse_tail(outputs: np.ndarray, batch: Batch):
    """Mean over the batch of the per-sample mean squared error."""
    diff = outputs - batch.targets
    n, d = diff.shape
    return float(np.sum(diff * diff) / (n * d)), 2.0 * diff / (n * d)


def loss_value(net: DenseNet, loss_tail: LossTail, batch: Batch) -> float:
    out = forward(net, batch.inputs)
    return loss_tail(out, batch)[0]


def backprop_grads(net: DenseNet, loss_tail: LossTail, batch: Batch):
    """Loss and gradients for ``net.params()`` (frozen layers excluded)."""
    out, cache = forward_cache(net, batch.inputs)
    loss, g_out = loss_tail(out, batch)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss", layer=len(net.layers) - 1)
    grads, _ = backward(net, cache, g_out)
    return loss, flat_grads(net, grads)


# --- optimizers ---------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ShapeError(f"unknown optimizer {self.kind!r}")


def step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState):
    """Update ``params`` in place; returns ``(params, state)``."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"shape mismatch {p.shape} vs {g.shape}")
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p -= state.lr * g
        return params, state
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# --- gradient verification ----------------------------------------------------


def grad_check_params(params, loss_fn, analytic, eps: float = 1e-5) -> float:
    """Max relative error of ``analytic`` against central differences.

    ``loss_fn()`` must read the arrays in ``params`` (perturbed in place here).
    """
    if eps <= 0:
        raise ShapeError("eps must be positive")
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn()
            flat[i] = orig - eps
            lo = loss_fn()
            flat[i] = orig
            cd = (hi - lo) / (2 * eps)
            err = abs(gflat[i] - cd) / max(abs(gflat[i]), abs(cd), 1e-12)
            # entries that are zero up to round-off in cd (~1e-11 * |loss|) carry no signal
            if max(abs(gflat[i]), abs(cd)) < 1e-7 and abs(gflat[i] - cd) < 1e-9:
                err = 0.0
            worst = max(worst, err)
    return worst


def grad_check(net: DenseNet, loss_tail: LossTail, batch: Batch, eps: float = 1e-5) -> float:
    _, grads = backprop_grads(net, loss_tail, batch)
    return grad_check_params(
        net.params(), lambda: loss_value(net, loss_tail, batch), grads, eps
    )


def min_kink_distance(net: DenseNet, x) -> float:
    """Smallest |pre-activation| over relu units; inf when the net has none."""
    _, (_, _, zs) = forward_cache(net, x)
    dist = np.inf
    for layer, z in zip(net.layers, zs):
        if layer.activation == "relu":
            dist = min(dist, float(np.min(np.abs(z))))
    return dist


# --- checkpoint files ---------------------------------------------------------

_MAGIC = b"DNET"
_VERSION = 1


def save_net(net: DenseNet, path) -> None:
    """Header (magic, version, layer count, frozen prefix, per-layer dims and
    activation codes) followed by row-major float64 little-endian W then b per layer."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, len(net.layers), net.frozen_prefix_len))
        for layer in net.layers:
            fh.write(struct.pack("<IIB", layer.in_dim, layer.out_dim, _ACT_CODE[layer.activation]))
        for layer in net.layers:
            fh.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def load_net(path) -> DenseNet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ShapeError(f"{path}: not a network checkpoint")
    version, n_layers, frozen = struct.unpack_from("<III", blob, 4)
    if version != _VERSION:
        raise ShapeError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack_from("<IIB", blob, off))
        off += 9
    layers = []
    for fan_in, fan_out, code in dims:
        w = np.frombuffer(blob, dtype="<f8", count=fan_in * fan_out, offset=off)
        off += 8 * fan_in * fan_out
        b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        layers.append(Layer(w.reshape(fan_out, fan_in).astype(np.float64), b.astype(np.float64),
                            ACTIVATIONS[code]))
    if off != len(blob):
        raise ShapeError(f"{path}: trailing bytes in checkpoint")
    return DenseNet(layers, frozen)
