"""Model descriptions, flat parameter layout, and the training-step kernel.

A model is a :class:`ModelSpec` (an ordered list of layer descriptors) plus
a :class:`ModelState` (one flat float64 parameter vector with a per-block
layout table). Keeping parameters flat makes masking, aggregation, and
wire encoding simple index arithmetic.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import LayoutError, NumericsError, SpecError
from .tensor import Tensor


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    has_bias: bool = True


@dataclass(frozen=True)
class Conv2d:
    """Stride-1, same-padded 2-d convolution; kernel_size must be odd."""

    in_channels: int
    out_channels: int
    kernel_size: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Dense | Conv2d | ReLU | Flatten


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        activation_shapes(self)  # raises SpecError on bad wiring


def activation_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Output shape after each layer; validates the spec while walking it."""
    cur = spec.input_shape
    if not all(isinstance(n, int) and n > 0 for n in cur):
        raise SpecError(f"input_shape must be positive ints, got {cur}")
    shapes: list[tuple[int, ...]] = []
    has_weights = False
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            if layer.in_dim <= 0 or layer.out_dim <= 0:
                raise SpecError(f"layer {i}: dense dims must be positive")
            if cur != (layer.in_dim,):
                raise SpecError(
                    f"layer {i}: dense expects input ({layer.in_dim},), got {cur}"
                )
            cur = (layer.out_dim,)
            has_weights = True
        elif isinstance(layer, Conv2d):
            if len(cur) != 3 or cur[0] != layer.in_channels:
                raise SpecError(
                    f"layer {i}: conv expects (C={layer.in_channels}, H, W), got {cur}"
                )
            if layer.kernel_size % 2 != 1 or layer.kernel_size <= 0:
                raise SpecError(f"layer {i}: kernel_size must be positive odd")
            if layer.out_channels <= 0:
                raise SpecError(f"layer {i}: out_channels must be positive")
            cur = (layer.out_channels, cur[1], cur[2])
            has_weights = True
        elif isinstance(layer, Flatten):
            cur = (int(np.prod(cur)),)
        elif isinstance(layer, ReLU):
            pass
        else:
            raise SpecError(f"layer {i}: unknown layer {layer!r}")
        shapes.append(cur)
    if not has_weights:
        raise SpecError("spec has no prunable weight layer")
    if cur != (spec.num_classes,):
        raise SpecError(f"final output {cur} does not match num_classes={spec.num_classes}")
    return shapes


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    offset: int
    shape: tuple[int, ...]
    prunable: bool

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class Layout:
    entries: tuple[LayoutEntry, ...]
    _by_name: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._by_name.update({e.name: e for e in self.entries})

    @property
    def n_params(self) -> int:
        return self.entries[-1].stop if self.entries else 0

    @functools.cached_property
    def prunable_index(self) -> np.ndarray:
        """Positions of prunable parameters inside the flat vector."""
        parts = [np.arange(e.offset, e.stop) for e in self.entries if e.prunable]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    @property
    def n_prunable(self) -> int:
        return len(self.prunable_index)

    def entry(self, name: str) -> LayoutEntry:
        return self._by_name[name]

    def entry_at(self, position: int) -> LayoutEntry:
        for e in self.entries:
            if e.offset <= position < e.stop:
                return e
        raise LayoutError(f"position {position} outside layout of {self.n_params}")


@functools.lru_cache(maxsize=None)
def build_layout(spec: ModelSpec) -> Layout:
    entries: list[LayoutEntry] = []
    off = 0
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            shape = (layer.out_dim, layer.in_dim)
            entries.append(LayoutEntry(f"{i}.weight", off, shape, prunable=True))
            off += layer.out_dim * layer.in_dim
            if layer.has_bias:
                entries.append(LayoutEntry(f"{i}.bias", off, (layer.out_dim,), prunable=False))
                off += layer.out_dim
        elif isinstance(layer, Conv2d):
            k = layer.kernel_size
            shape = (layer.out_channels, layer.in_channels, k, k)
            entries.append(LayoutEntry(f"{i}.weight", off, shape, prunable=True))
            off += int(np.prod(shape))
            entries.append(LayoutEntry(f"{i}.bias", off, (layer.out_channels,), prunable=False))
            off += layer.out_channels
    return Layout(tuple(entries))


@dataclass
class ModelState:
    """Flat parameter vector plus the layout that indexes it."""

    params: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.ndim != 1 or len(self.params) != self.layout.n_params:
            raise LayoutError(
                f"params length {self.params.size} does not match layout {self.layout.n_params}"
            )

    def get(self, name: str) -> np.ndarray:
        e = self.layout.entry(name)
        return self.params[e.offset : e.stop].reshape(e.shape).copy()

    def set(self, name: str, value) -> None:
        e = self.layout.entry(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != e.shape:
            raise LayoutError(f"{name}: expected shape {e.shape}, got {value.shape}")
        self.params[e.offset : e.stop] = value.ravel()

    def copy(self) -> "ModelState":
        return ModelState(self.params.copy(), self.layout)

    def prunable_values(self) -> np.ndarray:
        return self.params[self.layout.prunable_index]

    def nnz_prunable(self) -> int:
        return int(np.count_nonzero(self.prunable_values()))


def mlp_spec(input_dim: int, hidden: tuple[int, ...] | list[int], num_classes: int) -> ModelSpec:
    layers: list[LayerSpec] = []
    cur = input_dim
    for h in hidden:
        layers += [Dense(cur, h), ReLU()]
        cur = h
    layers.append(Dense(cur, num_classes))
    return ModelSpec(tuple(layers), (input_dim,), num_classes)


def cnn_spec(
    input_shape: tuple[int, int, int],
    channels: tuple[int, ...] | list[int],
    kernel_size: int,
    num_classes: int,
) -> ModelSpec:
    c, h, w = input_shape
    layers: list[LayerSpec] = []
    cur = c
    for ch in channels:
        layers += [Conv2d(cur, ch, kernel_size), ReLU()]
        cur = ch
    layers += [Flatten(), Dense(cur * h * w, num_classes)]
    return ModelSpec(tuple(layers), tuple(input_shape), num_classes)


def init_weights(spec: ModelSpec, seed: int) -> ModelState:
    """Fan-in scaled normal weights (variance 1/fan_in), zero biases.

    Deterministic: the same (spec, seed) reproduces the exact bits.
    """
    layout = build_layout(spec)
    rng = np.random.default_rng(seed)
    params = np.zeros(layout.n_params)
    for e in layout.entries:
        if not e.prunable:
            continue  # biases stay zero
        fan_in = int(np.prod(e.shape[1:]))
        params[e.offset : e.stop] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), e.size)
    return ModelState(params, layout)


@functools.lru_cache(maxsize=None)
def _im2col_index(c: int, h: int, w: int, k: int) -> np.ndarray:
    """Flat gather indices (C*k*k, H*W) into a padded (C, H+2p, W+2p) plane."""
    p = k // 2
    hp, wp = h + 2 * p, w + 2 * p
    ci, di, dj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
    patch = (ci * hp * wp + di * wp + dj).reshape(-1, 1)  # (C*k*k, 1)
    oi, oj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pixel = (oi * wp + oj).reshape(1, -1)  # (1, H*W)
    return patch + pixel


def _conv_forward(x: Tensor, weight: Tensor, bias: Tensor, layer: Conv2d, hw: tuple[int, int]) -> Tensor:
    b = x.shape[0]
    c, k = layer.in_channels, layer.kernel_size
    h, w = hw
    p = k // 2
    xp = T.pad2d(x, p)
    xf = T.reshape(xp, (b, c * (h + 2 * p) * (w + 2 * p)))
    cols = T.take_cols(xf, _im2col_index(c, h, w, k))  # (B, C*k*k, H*W)
    cols = T.reshape(T.transpose(cols, (1, 0, 2)), (c * k * k, b * h * w))
    w2 = T.reshape(weight, (layer.out_channels, c * k * k))
    out = T.matmul(w2, cols)  # (Cout, B*H*W)
    out = T.transpose(T.reshape(out, (layer.out_channels, b, h * w)), (1, 0, 2))
    out = T.reshape(out, (b, layer.out_channels, h, w))
    return T.add(out, T.reshape(bias, (1, layer.out_channels, 1, 1)))


def forward_graph(spec: ModelSpec, params: Tensor, x: Tensor) -> Tensor:
    """Logits as a graph over the flat parameter tensor."""
    layout = build_layout(spec)
    cur = x
    shape = spec.input_shape
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            e = layout.entry(f"{i}.weight")
            weight = T.reshape(T.slice1d(params, e.offset, e.stop), e.shape)
            cur = T.matmul(cur, T.transpose(weight))
            if layer.has_bias:
                eb = layout.entry(f"{i}.bias")
                bias = T.slice1d(params, eb.offset, eb.stop)
                cur = T.add(cur, T.reshape(bias, (1, layer.out_dim)))
            shape = (layer.out_dim,)
        elif isinstance(layer, Conv2d):
            e = layout.entry(f"{i}.weight")
            eb = layout.entry(f"{i}.bias")
            weight = T.reshape(T.slice1d(params, e.offset, e.stop), e.shape)
            bias = T.slice1d(params, eb.offset, eb.stop)
            cur = _conv_forward(cur, weight, bias, layer, (shape[1], shape[2]))
            shape = (layer.out_channels, shape[1], shape[2])
        elif isinstance(layer, ReLU):
            cur = T.relu(cur)
        elif isinstance(layer, Flatten):
            cur = T.reshape(cur, (cur.shape[0], int(np.prod(shape))))
            shape = (int(np.prod(shape)),)
    return cur


def _check_batch(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 + len(spec.input_shape) or x.shape[1:] != spec.input_shape:
        raise LayoutError(
            f"batch shape {x.shape} does not match (batch, *{spec.input_shape})"
        )
    return x


def forward(spec: ModelSpec, state: ModelState, batch_x) -> Tensor:
    """Logits of shape (batch, num_classes); no graph is recorded."""
    x = _check_batch(spec, batch_x.data if isinstance(batch_x, Tensor) else batch_x)
    with T.no_grad():
        return forward_graph(spec, Tensor(state.params), Tensor(x))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    y = np.asarray(labels)
    if y.size == 0:
        raise LayoutError("empty batch")
    b, k = logits.shape
    if y.max() >= k or y.min() < 0:
        raise LayoutError(f"labels must be in [0, {k}), got range [{y.min()}, {y.max()}]")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), y] = 1.0
    lse = T.logsumexp(logits, axis=1)  # (B, 1)
    picked = T.tsum(T.mul(logits, Tensor(onehot)), axis=1, keepdims=True)
    return T.mul(T.tsum(T.add(lse, T.neg(picked))), 1.0 / b)


def loss_and_grad(spec: ModelSpec, state: ModelState, batch_x, batch_y) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient over the flat parameter vector."""
    x = _check_batch(spec, batch_x.data if isinstance(batch_x, Tensor) else batch_x)
    if x.shape[0] == 0:
        raise LayoutError("empty batch")
    p = Tensor(state.params, requires_grad=True)
    loss = cross_entropy(forward_graph(spec, p, Tensor(x)), batch_y)
    (g,) = T.grad(loss, [p])
    return float(loss.data), g.data


def sgd_step(state: ModelState, grad: np.ndarray, lr: float, mask=None) -> ModelState:
    """One SGD update; masked positions are pinned to exactly zero.

    ``mask`` is a pruning mask over the prunable layout (see pruning
    module); parameters whose mask bit is 0 remain 0 after the step.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.params.shape:
        raise LayoutError(f"grad length {grad.size} != params length {state.params.size}")
    bad = ~np.isfinite(grad)
    if bad.any():
        pos = int(np.argmax(bad))
        raise NumericsError(
            f"non-finite gradient in layer {state.layout.entry_at(pos).name!r}"
        )
    new = state.params - lr * grad
    if mask is not None:
        idx = state.layout.prunable_index
        if len(mask.bits) != len(idx):
            raise LayoutError(
                f"mask length {len(mask.bits)} != prunable count {len(idx)}"
            )
        new[idx[mask.bits == 0]] = 0.0
    return ModelState(new, state.layout)
