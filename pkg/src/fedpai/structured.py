"""Structured channel pruning with early-stopping mask stabilization.

Channels are scored by the L1 norm of their outgoing weights (this kernel
has no batch norm, so norm-based scoring stands in for scale factors).
Masks are recomputed per round; once the newest mask's Hamming distance to
every mask in a short FIFO falls below a threshold, the mask is frozen and
the model is physically regrouped into a smaller one that computes the
same function as the masked original.

The classifier head is never channel-pruned: masks cover the hidden
weight layers only, so the output arity is preserved.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import LayoutError
from .model import (
    Conv2d,
    Dense,
    Flatten,
    ModelSpec,
    ModelState,
    activation_shapes,
    build_layout,
)
from .pruning import kept_count


def weight_layer_indices(spec: ModelSpec) -> list[int]:
    return [i for i, l in enumerate(spec.layers) if isinstance(l, (Dense, Conv2d))]


def hidden_weight_layers(spec: ModelSpec) -> list[int]:
    """Weight layers whose output channels may be pruned (all but the head)."""
    return weight_layer_indices(spec)[:-1]


def _out_channels(layer) -> int:
    return layer.out_dim if isinstance(layer, Dense) else layer.out_channels


@dataclass
class ChannelScores:
    values: tuple[np.ndarray, ...]
    layer_indices: tuple[int, ...]


@dataclass
class ChannelMask:
    """Per-layer keep bits over output channels of hidden weight layers."""

    bits: tuple[np.ndarray, ...]
    layer_indices: tuple[int, ...]
    kept_fraction: float

    def __post_init__(self):
        self.bits = tuple(np.ascontiguousarray(b, dtype=np.uint8) for b in self.bits)
        if len(self.bits) != len(self.layer_indices):
            raise LayoutError("one bit vector per covered layer required")
        for li, b in zip(self.layer_indices, self.bits):
            if b.sum() < 1:
                raise LayoutError(f"layer {li}: at least one channel must be kept")

    @property
    def total_bits(self) -> int:
        return sum(len(b) for b in self.bits)

    @property
    def n_kept(self) -> int:
        return int(sum(int(b.sum()) for b in self.bits))

    def to_jsonable(self) -> dict:
        return {
            "kept_fraction": self.kept_fraction,
            "layers": {str(i): b.tolist() for i, b in zip(self.layer_indices, self.bits)},
        }


@dataclass
class MaskHistory:
    """FIFO of the most recent channel masks with their round indices."""

    window: int
    masks: list[ChannelMask] = field(default_factory=list)
    rounds: list[int] = field(default_factory=list)

    def push(self, mask: ChannelMask, round_index: int) -> None:
        self.masks.append(mask)
        self.rounds.append(round_index)
        while len(self.masks) > self.window:
            self.masks.pop(0)
            self.rounds.pop(0)

    def __len__(self) -> int:
        return len(self.masks)


def channel_importance(spec: ModelSpec, state: ModelState) -> ChannelScores:
    """L1 norm of each output channel's outgoing weights, per hidden layer."""
    indices = hidden_weight_layers(spec)
    values = []
    for i in indices:
        w = state.get(f"{i}.weight")
        values.append(np.abs(w).sum(axis=tuple(range(1, w.ndim))))
    return ChannelScores(tuple(values), tuple(indices))


def channel_mask_from_scores(scores: ChannelScores, kappa: float) -> ChannelMask:
    """Keep the top ceil(kappa * C) channels per layer.

    The quota is per layer (not globally ranked) so no layer collapses;
    if a quota would round to zero it is clamped to one channel.
    """
    bits = []
    for li, vals in zip(scores.layer_indices, scores.values):
        c = len(vals)
        k = kept_count(kappa, c)
        if kappa * c < 1.0 and k == 1 and kappa * c <= 0:
            warnings.warn(f"layer {li}: quota clamped to 1 channel")
        order = np.argsort(-vals, kind="stable")
        b = np.zeros(c, dtype=np.uint8)
        b[order[:k]] = 1
        bits.append(b)
    return ChannelMask(tuple(bits), scores.layer_indices, kappa)


def hamming_distance(a: ChannelMask, b: ChannelMask) -> float:
    """Fraction of differing bits across all covered layers, in [0, 1]."""
    if a.layer_indices != b.layer_indices or any(
        len(x) != len(y) for x, y in zip(a.bits, b.bits)
    ):
        raise LayoutError("channel masks are not congruent")
    diff = sum(int(np.count_nonzero(x != y)) for x, y in zip(a.bits, b.bits))
    return diff / a.total_bits


def ebt_check(history: MaskHistory, epsilon: float) -> ChannelMask | None:
    """Freeze the newest mask once it is stable across the FIFO.

    Fires when the maximum Hamming distance between the newest mask and
    every earlier mask in the window is below ``epsilon``. Needs at least
    two masks; with a window of one past mask this reduces to comparing
    two consecutive rounds.
    """
    if len(history) < 2:
        return None
    newest = history.masks[-1]
    worst = max(hamming_distance(newest, m) for m in history.masks[:-1])
    return newest if worst < epsilon else None


def _keep_walk(spec: ModelSpec, mask: ChannelMask):
    """Per weight layer: (layer_index, input keep vector, output keep vector).

    Input keep vectors are per-feature for dense layers and per-channel
    for conv layers; flatten expands a channel keep across its spatial
    positions. Raises on masks that do not line up with the spec.
    """
    covered = dict(zip(mask.layer_indices, mask.bits))
    hidden = set(hidden_weight_layers(spec))
    for li in covered:
        if li not in hidden:
            raise LayoutError(f"layer {li} is not a prunable hidden weight layer")
    shapes = [spec.input_shape] + activation_shapes(spec)
    out = []
    # input features/channels are never pruned
    keep = np.ones(spec.input_shape[0], dtype=bool)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, (Dense, Conv2d)):
            n_out = _out_channels(layer)
            if i in covered:
                bits = covered[i]
                if len(bits) != n_out:
                    raise LayoutError(
                        f"layer {i}: mask has {len(bits)} bits for {n_out} channels"
                    )
                out_keep = bits.astype(bool)
            else:
                out_keep = np.ones(n_out, dtype=bool)
            out.append((i, keep, out_keep))
            keep = out_keep
        elif isinstance(layer, Flatten):
            c, h, w = shapes[i]
            keep = np.repeat(keep, h * w)
    return out


def regroup(spec: ModelSpec, state: ModelState, mask: ChannelMask) -> tuple[ModelSpec, ModelState]:
    """Delete pruned channels, producing a physically smaller model.

    The regrouped model's forward outputs equal the masked big model's
    outputs (up to float re-association in the dot products).
    """
    walk = _keep_walk(spec, mask)
    keep_by_layer = {i: (ik, ok) for i, ik, ok in walk}
    new_layers = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            ik, ok = keep_by_layer[i]
            new_layers.append(Dense(int(ik.sum()), int(ok.sum()), layer.has_bias))
        elif isinstance(layer, Conv2d):
            ik, ok = keep_by_layer[i]
            new_layers.append(Conv2d(int(ik.sum()), int(ok.sum()), layer.kernel_size))
        else:
            new_layers.append(layer)
    new_spec = ModelSpec(tuple(new_layers), spec.input_shape, spec.num_classes)
    layout = build_layout(new_spec)
    params = np.zeros(layout.n_params)
    new_state = ModelState(params, layout)
    old_layout = build_layout(spec)
    for i, ik, ok in walk:
        w = state.get(f"{i}.weight")
        new_state.set(f"{i}.weight", w[ok][:, ik])
        bias_name = f"{i}.bias"
        if bias_name in old_layout._by_name:
            new_state.set(bias_name, state.get(bias_name)[ok])
    return new_spec, new_state


def apply_channel_mask(spec: ModelSpec, state: ModelState, mask: ChannelMask) -> ModelState:
    """Zero pruned channels in place of deleting them.

    Zeroes each pruned channel's outgoing weights and bias, plus the
    downstream weights reading from it, so the masked model computes
    exactly what the regrouped model computes.
    """
    out = state.copy()
    old_layout = build_layout(spec)
    for i, ik, ok in _keep_walk(spec, mask):
        w = out.get(f"{i}.weight")
        w[~ok] = 0.0
        w[:, ~ik] = 0.0
        out.set(f"{i}.weight", w)
        bias_name = f"{i}.bias"
        if bias_name in old_layout._by_name:
            b = out.get(bias_name)
            b[~ok] = 0.0
            out.set(bias_name, b)
    return out
