"""Unstructured pruning: masks, gradient-flow scoring, magnitude baseline.

The gradient-flow importance score of a weight is s = -W * Hg, where Hg is
the Hessian-gradient product obtained by differentiating g^T stop_grad(g)
a second time. Keeping the top-kappa scores preserves the connections that
contribute most to gradient flow at initialization. Note the selection
keeps the *largest* s values; see README for discussion of the sign
convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, LayoutError, NumericsError
from .model import ModelSpec, ModelState, cross_entropy, forward_graph
from .tensor import Tensor


def kept_count(kappa: float, n: int) -> int:
    """ceil(kappa * n), guarded against float round-up of exact products."""
    if not 0.0 < kappa <= 1.0:
        raise ConfigError(field="kappa", value=kappa, allowed="in (0,1]")
    return max(1, math.ceil(kappa * n - 1e-9))


@dataclass
class Mask:
    """Binary keep/drop bits over the prunable-parameter layout."""

    bits: np.ndarray
    kept_fraction: float

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        n = len(self.bits)
        if n and abs(self.popcount / n - self.kept_fraction) > 1.0 / n + 1e-12:
            raise LayoutError(
                f"mask popcount {self.popcount}/{n} inconsistent with "
                f"kept_fraction {self.kept_fraction}"
            )

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def ones(cls, n: int) -> "Mask":
        return cls(np.ones(n, dtype=np.uint8), 1.0)


@dataclass
class ImportanceScore:
    """Per-weight scores over the prunable layout; finite by construction."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(self.values).all():
            raise NumericsError("importance scores contain non-finite values")


def grasp_score_from_loss(loss_fn: Callable[[Tensor], Tensor], params: np.ndarray) -> np.ndarray:
    """-W * Hg for an arbitrary scalar loss over a flat parameter vector.

    Runs one differentiable gradient pass, then differentiates
    g^T stop_grad(g) to get the Hessian-gradient product.
    """
    p = Tensor(np.asarray(params, dtype=np.float64), requires_grad=True)
    loss = loss_fn(p)
    (g,) = T.grad(loss, [p], create_graph=True)
    hg_scalar = T.tsum(T.mul(g, g.detach()))
    (hg,) = T.grad(hg_scalar, [p])
    return -(p.data * hg.data)


def grasp_score(spec: ModelSpec, state: ModelState, batch_x, batch_y) -> ImportanceScore:
    """Gradient-flow scores for the prunable weights of a model.

    ``state`` should be at initialization (pre-training); the score is a
    pure function of (state, batch).
    """
    x = np.asarray(batch_x, dtype=np.float64)
    if x.shape[0] == 0:
        raise LayoutError("empty batch")

    def loss_fn(p: Tensor) -> Tensor:
        return cross_entropy(forward_graph(spec, p, Tensor(x)), batch_y)

    full = grasp_score_from_loss(loss_fn, state.params)
    values = full[state.layout.prunable_index]
    if not np.isfinite(values).all():
        raise NumericsError("gradient-flow score is non-finite (exploding Hg?)")
    return ImportanceScore(values)


def top_kappa_mask(scores, kappa: float) -> Mask:
    """Keep the positions of the ceil(kappa*n) largest scores.

    Ranking is global across all prunable layers; ties at the threshold
    are broken in favor of the lower flat index.
    """
    values = scores.values if isinstance(scores, ImportanceScore) else np.asarray(scores, dtype=np.float64)
    n = len(values)
    k = kept_count(kappa, n)
    order = np.argsort(-values, kind="stable")
    bits = np.zeros(n, dtype=np.uint8)
    bits[order[:k]] = 1
    return Mask(bits, kappa)


def apply_mask(state: ModelState, mask: Mask) -> ModelState:
    """Zero the prunable parameters whose mask bit is 0."""
    idx = state.layout.prunable_index
    if len(mask.bits) != len(idx):
        raise LayoutError(
            f"mask length {len(mask.bits)} != prunable count {len(idx)}"
        )
    new = state.params.copy()
    new[idx[mask.bits == 0]] = 0.0
    return ModelState(new, state.layout)


def magnitude_mask(state: ModelState, kappa: float) -> Mask:
    """Top-kappa mask by absolute weight value, globally ranked."""
    return top_kappa_mask(np.abs(state.prunable_values()), kappa)


def iterative_prune_schedule(round: int, target_kappa: float, total_prune_rounds: int) -> float:
    """Geometric interpolation 1.0 -> target_kappa over the prune rounds."""
    if not 0.0 < target_kappa <= 1.0:
        raise ConfigError(field="target_kappa", value=target_kappa, allowed="in (0,1]")
    if round < 0:
        raise ConfigError(field="round", value=round, allowed=">= 0")
    if total_prune_rounds < 1:
        raise ConfigError(field="total_prune_rounds", value=total_prune_rounds, allowed=">= 1")
    if round >= total_prune_rounds:
        return target_kappa
    return float(target_kappa ** (round / total_prune_rounds))
