"""Minimal CPU neural-network engine.

Dense/conv2d/relu/maxpool/flatten layers with hand-written backward rules,
momentum SGD, fan-in-scaled uniform init, a central finite-difference oracle
for gradient checking, and a bit-exact binary checkpoint format.

Everything is float64. Networks and gradients are plain values: operations
return new objects instead of mutating their inputs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

CHECKPOINT_MAGIC = b"LLEAKS1\x00"

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2x2", "flatten")
PARAM_KINDS = ("dense", "conv2d")


class ShapeError(ValueError):
    """A batch or gradient does not fit the network it was paired with."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed (bad magic, truncated, wrong shapes)."""


@dataclass
class Layer:
    """One network layer: a kind tag plus optional weight/bias arrays.

    dense:   w (fan_out, fan_in), b (fan_out,)
    conv2d:  w (out_ch, in_ch, kh, kw), b (out_ch,); valid padding, stride 1
    relu / maxpool2x2 / flatten carry no parameters.
    """

    kind: str
    w: np.ndarray | None = None
    b: np.ndarray | None = None
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in PARAM_KINDS:
            if self.w is None or self.b is None:
                raise ValueError(f"{self.kind} layer requires w and b")
        elif self.w is not None or self.b is not None:
            raise ValueError(f"{self.kind} layer must not carry parameters")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS


@dataclass
class Network:
    layers: list[Layer]
    arch_id: str
    num_classes: int
    input_shape: tuple[int, ...]

    def copy(self) -> "Network":
        layers = [
            Layer(l.kind, None if l.w is None else l.w.copy(),
                  None if l.b is None else l.b.copy(), dict(l.hyper))
            for l in self.layers
        ]
        return Network(layers, self.arch_id, self.num_classes, tuple(self.input_shape))

    def param_count(self) -> int:
        return sum(l.w.size + l.b.size for l in self.layers if l.has_params)

    def equal_weights(self, other: "Network") -> bool:
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.kind != b.kind:
                return False
            if a.has_params and not (
                np.array_equal(a.w, b.w) and np.array_equal(a.b, b.b)
            ):
                return False
        return True


@dataclass
class Gradients:
    """Per-layer (dw, db) pairs aligned with Network.layers; None when parameterless."""

    entries: list[tuple[np.ndarray, np.ndarray] | None]

    @staticmethod
    def zeros(net: Network) -> "Gradients":
        return Gradients([
            (np.zeros_like(l.w), np.zeros_like(l.b)) if l.has_params else None
            for l in net.layers
        ])

    def check_congruent(self, net: Network) -> None:
        if len(self.entries) != len(net.layers):
            raise ShapeError("gradient entry count does not match layer count")
        for i, (entry, layer) in enumerate(zip(self.entries, net.layers)):
            if layer.has_params:
                if entry is None:
                    raise ShapeError(f"missing gradient entry for layer {i} ({layer.kind})")
                dw, db = entry
                if dw.shape != layer.w.shape or db.shape != layer.b.shape:
                    raise ShapeError(f"gradient shape mismatch at layer {i} ({layer.kind})")
            elif entry is not None:
                raise ShapeError(f"unexpected gradient entry for layer {i} ({layer.kind})")


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    momentum: float = 0.0
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


# ---------------------------------------------------------------------------
# Layer forward/backward rules.
#
# Each forward returns (output, cache); the matching backward consumes the
# cache and the upstream gradient and returns (d_input, dw, db).
# ---------------------------------------------------------------------------

def _dense_forward(layer: Layer, x: np.ndarray, li: int):
    if x.ndim != 2 or x.shape[1] != layer.w.shape[1]:
        raise ShapeError(
            f"layer {li} (dense) expects (batch, {layer.w.shape[1]}), got {x.shape}"
        )
    return x @ layer.w.T + layer.b, x


def _dense_backward(layer: Layer, dy: np.ndarray, x: np.ndarray):
    dw = dy.T @ x
    db = dy.sum(axis=0)
    dx = dy @ layer.w
    return dx, dw, db


# Two equivalent conv kernels: channels-first batched matmuls win for small
# input-channel counts; a single channels-last dgemm wins once ic*kh*kw gets
# wide. Dispatch on the input channel count.
_NHWC_MIN_CHANNELS = 12


def _conv2d_forward(layer: Layer, x: np.ndarray, li: int):
    oc, ic, kh, kw = layer.w.shape
    if x.ndim != 4 or x.shape[1] != ic:
        raise ShapeError(
            f"layer {li} (conv2d) expects (batch, {ic}, h, w), got {x.shape}"
        )
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeError(
            f"layer {li} (conv2d) kernel {kh}x{kw} larger than input {x.shape[2]}x{x.shape[3]}"
        )
    n = x.shape[0]
    oh, ow = x.shape[2] - kh + 1, x.shape[3] - kw + 1
    if ic < _NHWC_MIN_CHANNELS:
        cols = np.empty((n, ic, kh, kw, oh, ow))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = x[:, :, i:i + oh, j:j + ow]
        cols = cols.reshape(n, ic * kh * kw, oh * ow)
        y = (layer.w.reshape(oc, -1) @ cols).reshape(n, oc, oh, ow)
        y += layer.b[:, None, None]
        return y, ("nchw", cols, None, x.shape)
    xt = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    cols = np.empty((n, oh, ow, kh, kw, ic))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xt[:, i:i + oh, j:j + ow, :]
    cols = cols.reshape(n * oh * ow, kh * kw * ic)
    wt = np.ascontiguousarray(layer.w.transpose(2, 3, 1, 0)).reshape(kh * kw * ic, oc)
    y = cols @ wt + layer.b
    y = np.ascontiguousarray(y.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2))
    return y, ("nhwc", cols, wt, x.shape)


def _conv2d_backward(layer: Layer, dy: np.ndarray, cache):
    layout, cols, wt, x_shape = cache
    oc, ic, kh, kw = layer.w.shape
    n, _, h, w = x_shape
    oh, ow = h - kh + 1, w - kw + 1
    if layout == "nchw":
        dy2 = dy.reshape(n, oc, oh * ow)
        dw = np.tensordot(dy2, cols, axes=([0, 2], [0, 2])).reshape(oc, ic, kh, kw)
        db = dy2.sum(axis=(0, 2))
        dcols = (layer.w.reshape(oc, -1).T @ dy2).reshape(n, ic, kh, kw, oh, ow)
        dx = np.zeros(x_shape)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + oh, j:j + ow] += dcols[:, :, i, j]
        return dx, dw, db
    dy2 = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * oh * ow, oc)
    dw = np.ascontiguousarray((cols.T @ dy2).reshape(kh, kw, ic, oc).transpose(3, 2, 0, 1))
    db = dy2.sum(axis=0)
    dcols = (dy2 @ wt.T).reshape(n, oh, ow, kh, kw, ic)
    dxt = np.zeros((n, h, w, ic))
    for i in range(kh):
        for j in range(kw):
            dxt[:, i:i + oh, j:j + ow, :] += dcols[:, :, :, i, j, :]
    dx = np.ascontiguousarray(dxt.transpose(0, 3, 1, 2))
    return dx, dw, db


def _relu_forward(layer: Layer, x: np.ndarray, li: int):
    return np.maximum(x, 0.0), x


def _relu_backward(layer: Layer, dy: np.ndarray, x: np.ndarray):
    return dy * (x > 0), None, None


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _maxpool_forward(layer: Layer, x: np.ndarray, li: int):
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"layer {li} (maxpool2x2) expects (batch, c, h>=2, w>=2), got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    y = x[:, :, 0:oh * 2:2, 0:ow * 2:2].copy()
    for di, dj in _POOL_OFFSETS[1:]:
        np.maximum(y, x[:, :, di:oh * 2:2, dj:ow * 2:2], out=y)
    return y, (x, y)


def _maxpool_backward(layer: Layer, dy: np.ndarray, cache):
    x, y = cache
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    dx = np.zeros(x.shape)
    claimed = np.zeros(y.shape, dtype=bool)
    # route dy to the first window position attaining the max (fixed tie order)
    for di, dj in _POOL_OFFSETS:
        window = x[:, :, di:oh * 2:2, dj:ow * 2:2]
        sel = (window == y) & ~claimed
        dx[:, :, di:oh * 2:2, dj:ow * 2:2] += dy * sel
        claimed |= sel
    return dx, None, None


def _flatten_forward(layer: Layer, x: np.ndarray, li: int):
    return x.reshape(x.shape[0], -1), x.shape


def _flatten_backward(layer: Layer, dy: np.ndarray, x_shape):
    return dy.reshape(x_shape), None, None


_FORWARD = {
    "dense": _dense_forward,
    "conv2d": _conv2d_forward,
    "relu": _relu_forward,
    "maxpool2x2": _maxpool_forward,
    "flatten": _flatten_forward,
}
_BACKWARD = {
    "dense": _dense_backward,
    "conv2d": _conv2d_backward,
    "relu": _relu_backward,
    "maxpool2x2": _maxpool_backward,
    "flatten": _flatten_backward,
}


@dataclass
class ForwardTrace:
    """Forward pass with per-layer caches retained for a later backward pass."""

    net: Network
    batch: np.ndarray
    logits: np.ndarray
    caches: list


def forward_trace(net: Network, batch: np.ndarray) -> ForwardTrace:
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != tuple(net.input_shape):
        raise ShapeError(
            f"input batch shape {x.shape} does not match network input {tuple(net.input_shape)}"
        )
    caches = []
    for li, layer in enumerate(net.layers):
        x, cache = _FORWARD[layer.kind](layer, x, li)
        caches.append(cache)
    if x.ndim != 2 or x.shape[1] != net.num_classes:
        raise ShapeError(
            f"network emitted shape {x.shape}, expected (batch, {net.num_classes}) logits"
        )
    if not np.isfinite(x).all():
        raise FloatingPointError("non-finite logits produced by forward pass")
    return ForwardTrace(net, batch, x, caches)


def forward(net: Network, batch: np.ndarray) -> np.ndarray:
    """Run the network on a batch and return raw logits (no softmax)."""
    return forward_trace(net, batch).logits


def backward_trace(trace: ForwardTrace, upstream_grad: np.ndarray) -> Gradients:
    dy = np.asarray(upstream_grad, dtype=np.float64)
    if dy.shape != trace.logits.shape:
        raise ShapeError(
            f"upstream gradient shape {dy.shape} does not match logits {trace.logits.shape}"
        )
    entries: list = [None] * len(trace.net.layers)
    for li in range(len(trace.net.layers) - 1, -1, -1):
        layer = trace.net.layers[li]
        dy, dw, db = _BACKWARD[layer.kind](layer, dy, trace.caches[li])
        if layer.has_params:
            entries[li] = (dw, db)
    return Gradients(entries)


def backward(net: Network, batch: np.ndarray, upstream_grad: np.ndarray) -> Gradients:
    """Gradients of sum(logits * upstream_grad) with respect to every parameter."""
    return backward_trace(forward_trace(net, batch), upstream_grad)


def finite_difference_grad(
    net: Network,
    loss_fn: Callable[[np.ndarray], float],
    batch: np.ndarray,
    param_index: tuple[int, str, int],
    h: float = 1e-5,
) -> float:
    """Central-difference derivative of loss_fn(forward(net, batch)) in one parameter.

    param_index is (layer_index, "w" or "b", flat offset into that array).
    """
    li, name, flat = param_index
    probe = net.copy()
    arr = getattr(probe.layers[li], name)
    orig = arr.flat[flat]
    arr.flat[flat] = orig + h
    plus = float(loss_fn(forward(probe, batch)))
    arr.flat[flat] = orig - h
    minus = float(loss_fn(forward(probe, batch)))
    arr.flat[flat] = orig
    return (plus - minus) / (2.0 * h)


def finite_difference_full(
    net: Network,
    loss_fn: Callable[[np.ndarray], float],
    batch: np.ndarray,
    h: float = 1e-5,
) -> Gradients:
    """Finite-difference gradient for every parameter. Only viable on tiny nets."""
    entries: list = []
    for li, layer in enumerate(net.layers):
        if not layer.has_params:
            entries.append(None)
            continue
        dw = np.zeros_like(layer.w)
        db = np.zeros_like(layer.b)
        for flat in range(layer.w.size):
            dw.flat[flat] = finite_difference_grad(net, loss_fn, batch, (li, "w", flat), h)
        for flat in range(layer.b.size):
            db.flat[flat] = finite_difference_grad(net, loss_fn, batch, (li, "b", flat), h)
        entries.append((dw, db))
    return Gradients(entries)


def sgd_step(
    net: Network, grads: Gradients, cfg: SgdConfig, velocity: Gradients
) -> tuple[Network, Gradients]:
    """One momentum-SGD update: v <- m*v + g, theta <- theta - lr*v. Pure."""
    grads.check_congruent(net)
    velocity.check_congruent(net)
    layers = []
    vel_entries: list = []
    for layer, g, v in zip(net.layers, grads.entries, velocity.entries):
        if not layer.has_params:
            layers.append(Layer(layer.kind, hyper=dict(layer.hyper)))
            vel_entries.append(None)
            continue
        vw = cfg.momentum * v[0] + g[0]
        vb = cfg.momentum * v[1] + g[1]
        layers.append(
            Layer(
                layer.kind,
                layer.w - cfg.learning_rate * vw,
                layer.b - cfg.learning_rate * vb,
                dict(layer.hyper),
            )
        )
        vel_entries.append((vw, vb))
    new_net = Network(layers, net.arch_id, net.num_classes, tuple(net.input_shape))
    return new_net, Gradients(vel_entries)


# ---------------------------------------------------------------------------
# Architecture registry and initialization.
#
# Recipes are registered by higher-level modules; a recipe maps
# (input_shape, num_classes) to a list of zero-initialized layers.
# ---------------------------------------------------------------------------

_ARCH_RECIPES: dict[str, Callable[[tuple[int, ...], int], list[Layer]]] = {}


def register_arch(arch_id: str, recipe: Callable[[tuple[int, ...], int], list[Layer]]) -> None:
    _ARCH_RECIPES[arch_id] = recipe


def registered_archs() -> list[str]:
    return sorted(_ARCH_RECIPES)


def _fan_in(layer: Layer) -> int:
    if layer.kind == "dense":
        return layer.w.shape[1]
    oc, ic, kh, kw = layer.w.shape
    return ic * kh * kw


def init_network(
    arch_id: str, input_shape, num_classes: int, seed: int
) -> Network:
    """Build a registered architecture with fan-in-scaled uniform weights, zero bias.

    Weights are drawn from U(-sqrt(1/fan_in), +sqrt(1/fan_in)); the draw order is
    fixed (layer order, weights only), so equal seeds give bit-identical networks.
    """
    if arch_id not in _ARCH_RECIPES:
        raise ValueError(f"unknown architecture {arch_id!r}; known: {registered_archs()}")
    input_shape = tuple(int(d) for d in input_shape)
    layers = _ARCH_RECIPES[arch_id](input_shape, num_classes)
    rng = np.random.default_rng(seed)
    for layer in layers:
        if layer.has_params:
            bound = np.sqrt(1.0 / _fan_in(layer))
            layer.w = rng.uniform(-bound, bound, size=layer.w.shape)
            layer.b = np.zeros_like(layer.b)
    net = Network(layers, arch_id, int(num_classes), input_shape)
    forward(net, np.zeros((1,) + input_shape))  # validate wiring up front
    return net


# ---------------------------------------------------------------------------
# Checkpoint format (bit-exact):
#   magic "LLEAKS1\0"
#   u32 descriptor length, UTF-8 architecture descriptor
#   u32 num_classes
#   u32 input rank, u32 dims...
#   per parameterized layer, for w then b: u32 rank, u32 dims..., raw LE f64
# All integers little-endian.
# ---------------------------------------------------------------------------

def network_to_bytes(net: Network) -> bytes:
    chunks = [CHECKPOINT_MAGIC]
    desc = net.arch_id.encode("utf-8")
    chunks.append(struct.pack("<I", len(desc)))
    chunks.append(desc)
    chunks.append(struct.pack("<I", net.num_classes))
    chunks.append(struct.pack("<I", len(net.input_shape)))
    chunks.append(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    for layer in net.layers:
        if not layer.has_params:
            continue
        for arr in (layer.w, layer.b):
            chunks.append(struct.pack("<I", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_network(net: Network, path) -> None:
    with open(path, "wb") as f:
        f.write(network_to_bytes(net))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint {self.path}: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_network(path) -> Network:
    with open(path, "rb") as f:
        return network_from_bytes(f.read(), path)


def network_from_bytes(data: bytes, path="<bytes>") -> Network:
    r = _Reader(data, path)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic in {path}: not a network checkpoint")
    arch_id = r.take(r.u32()).decode("utf-8")
    num_classes = r.u32()
    rank = r.u32()
    input_shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
    if arch_id not in _ARCH_RECIPES:
        raise CheckpointError(f"checkpoint {path} names unknown architecture {arch_id!r}")
    layers = _ARCH_RECIPES[arch_id](tuple(input_shape), num_classes)
    for li, layer in enumerate(layers):
        if not layer.has_params:
            continue
        for name in ("w", "b"):
            expect = getattr(layer, name)
            arr_rank = r.u32()
            dims = struct.unpack(f"<{arr_rank}I", r.take(4 * arr_rank))
            if dims != expect.shape:
                raise CheckpointError(
                    f"shape descriptor mismatch in {path} at layer {li} {name}: "
                    f"file has {dims}, architecture expects {expect.shape}"
                )
            count = int(np.prod(dims)) if dims else 1
            raw = r.take(8 * count)
            setattr(layer, name, np.frombuffer(raw, dtype="<f8").reshape(dims).copy())
    if r.pos != len(r.data):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return Network(layers, arch_id, num_classes, tuple(input_shape))
