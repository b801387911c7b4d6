"""Shared test oracles: finite differences and random small models."""

from __future__ import annotations

import numpy as np

from fedpai.model import ModelState, cnn_spec, init_weights, loss_and_grad, mlp_spec


def fd_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a flat vector."""
    g = np.zeros_like(x)
    for i in range(len(x)):
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def fd_hvp(grad_fn, x: np.ndarray, v: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Forward-difference Hessian-vector product (grad(x + eps v) - grad(x)) / eps."""
    return (grad_fn(x + eps * v) - grad_fn(x)) / eps


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def model_loss_fn(spec, state, x, y):
    def f(p):
        return loss_and_grad(spec, ModelState(p, state.layout), x, y)[0]

    return f


def model_grad_fn(spec, state, x, y):
    def g(p):
        return loss_and_grad(spec, ModelState(p, state.layout), x, y)[1]

    return g


def _relu_margin(spec, state, x: np.ndarray) -> float:
    """Smallest |pre-activation| seen at any ReLU (naive numpy forward)."""
    from fedpai.model import Conv2d, Dense, Flatten, ReLU

    cur = x
    margin = np.inf
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            cur = cur @ state.get(f"{i}.weight").T
            if layer.has_bias:
                cur = cur + state.get(f"{i}.bias")
        elif isinstance(layer, Conv2d):
            w = state.get(f"{i}.weight")
            b = state.get(f"{i}.bias")
            k = layer.kernel_size
            p = k // 2
            pad = np.pad(cur, ((0, 0), (0, 0), (p, p), (p, p)))
            n, _, h, wd = cur.shape
            out = np.zeros((n, layer.out_channels, h, wd))
            for s in range(n):
                for o in range(layer.out_channels):
                    for r in range(h):
                        for c in range(wd):
                            out[s, o, r, c] = (pad[s, :, r : r + k, c : c + k] * w[o]).sum() + b[o]
            cur = out
        elif isinstance(layer, Flatten):
            cur = cur.reshape(len(cur), -1)
        elif isinstance(layer, ReLU):
            margin = min(margin, float(np.abs(cur).min()))
            cur = np.maximum(cur, 0)
    return margin


def random_small_model(rng: np.random.Generator, seed: int):
    """A random MLP or small CNN with at most ~500 parameters, plus a batch.

    Batches are redrawn until every ReLU pre-activation is at least 1e-3
    from its kink: the finite-difference oracle is only valid where the
    loss is differentiable in an eps-neighborhood.
    """
    if rng.random() < 0.7:
        in_dim = int(rng.integers(2, 8))
        classes = int(rng.integers(2, 5))
        hidden = [int(rng.integers(2, 9)) for _ in range(int(rng.integers(1, 3)))]
        spec = mlp_spec(in_dim, hidden, classes)
        batch = int(rng.integers(2, 7))
        shape = (batch, in_dim)
    else:
        side = int(rng.integers(3, 6))
        channels = [int(rng.integers(1, 4))]
        classes = int(rng.integers(2, 4))
        spec = cnn_spec((1, side, side), channels, 3, classes)
        batch = int(rng.integers(2, 5))
        shape = (batch, 1, side, side)
    state = init_weights(spec, seed)
    assert len(state.params) <= 500
    for _ in range(100):
        x = rng.normal(size=shape)
        if _relu_margin(spec, state, x) > 1e-3:
            break
    y = rng.integers(0, spec.num_classes, len(x))
    return spec, state, x, y
