"""Masks, gradient-flow scoring, magnitude baseline, prune schedule."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpai import tensor as T
from fedpai.errors import ConfigError, LayoutError, NumericsError
from fedpai.model import ModelState, init_weights, mlp_spec
from fedpai.pruning import (
    ImportanceScore,
    Mask,
    apply_mask,
    grasp_score,
    grasp_score_from_loss,
    iterative_prune_schedule,
    magnitude_mask,
    top_kappa_mask,
)
from fedpai.tensor import Tensor

from helpers import fd_hvp, model_grad_fn, random_small_model, rel_err


def quadratic_loss(diag):
    a = Tensor(np.asarray(diag, dtype=np.float64))

    def loss(p):
        return T.mul(T.tsum(T.mul(T.mul(a, p), p)), 0.5)

    return loss


def test_grasp_analytic_quadratic_exact():
    # L = 0.5 w^T diag(2,4) w at w=(1,1): g=(2,4), Hg=(4,16), s=(-4,-16)
    s = grasp_score_from_loss(quadratic_loss([2.0, 4.0]), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(s, [-4.0, -16.0])
    mask = top_kappa_mask(s, 0.5)
    np.testing.assert_array_equal(mask.bits, [1, 0])


def test_grasp_zero_weights_zero_scores():
    spec = mlp_spec(3, [4], 2)
    state = init_weights(spec, 0)
    state.params[:] = 0.0
    scores = grasp_score(spec, state, np.ones((4, 3)), np.array([0, 1, 1, 0]))
    np.testing.assert_array_equal(scores.values, np.zeros(state.layout.n_prunable))


def test_grasp_hg_matches_fd_hvp():
    rng = np.random.default_rng(10)
    for seed in range(3):
        spec, state, x, y = random_small_model(rng, seed)
        scores = grasp_score(spec, state, x, y)
        grad_fn = model_grad_fn(spec, state, x, y)
        g = grad_fn(state.params)
        hg_fd = fd_hvp(grad_fn, state.params, g, eps=1e-4)
        want = -(state.params * hg_fd)[state.layout.prunable_index]
        assert rel_err(scores.values, want, floor=1e-5).max() < 1e-3


def test_grasp_deterministic():
    spec = mlp_spec(4, [5], 3)
    state = init_weights(spec, 1)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(8, 4))
    y = rng.integers(0, 3, 8)
    a = grasp_score(spec, state, x, y)
    b = grasp_score(spec, state, x, y)
    assert np.array_equal(a.values, b.values)


def test_grasp_empty_batch():
    spec = mlp_spec(4, [5], 3)
    state = init_weights(spec, 1)
    with pytest.raises(LayoutError):
        grasp_score(spec, state, np.zeros((0, 4)), np.zeros(0, dtype=int))


def test_importance_score_rejects_nonfinite():
    with pytest.raises(NumericsError):
        ImportanceScore(np.array([1.0, np.nan]))


def _brute_force_top_k(values, k):
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    keep = np.zeros(len(values), dtype=np.uint8)
    keep[order[:k]] = 1
    return keep


def test_top_kappa_examples():
    np.testing.assert_array_equal(top_kappa_mask(np.array([3.0, 1.0, 2.0, 0.0]), 0.5).bits, [1, 0, 1, 0])
    np.testing.assert_array_equal(top_kappa_mask(np.array([3.0, 1.0, 2.0, 0.0]), 1.0).bits, [1, 1, 1, 1])


def test_top_kappa_invalid_kappa():
    for bad in (0.0, -0.5, 1.5):
        with pytest.raises(ConfigError, match=r"kappa must be in \(0,1\]"):
            top_kappa_mask(np.array([1.0, 2.0]), bad)


def test_top_kappa_exact_cardinality():
    rng = np.random.default_rng(0)
    for n in (10, 100, 4501):
        values = rng.normal(size=n)
        for kappa in (0.9, 0.5, 0.1, 0.02):
            mask = top_kappa_mask(values, kappa)
            assert mask.popcount == int(np.ceil(np.round(kappa * n, 9)))


def test_top_kappa_scale_equivariance():
    rng = np.random.default_rng(1)
    values = rng.normal(size=50)
    base = top_kappa_mask(values, 0.3).bits
    for c in (0.5, 2.0, 1e6):
        np.testing.assert_array_equal(top_kappa_mask(c * values, 0.3).bits, base)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=64), st.floats(0.01, 1.0))
def test_top_kappa_matches_brute_force(values, kappa):
    values = np.asarray(values)
    mask = top_kappa_mask(values, kappa)
    np.testing.assert_array_equal(mask.bits, _brute_force_top_k(values, mask.popcount))


def test_top_kappa_brute_force_large_instances():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(10, 10_000))
        values = rng.normal(size=n)
        kappa = float(rng.uniform(0.01, 1.0))
        mask = top_kappa_mask(values, kappa)
        np.testing.assert_array_equal(mask.bits, _brute_force_top_k(values, mask.popcount))


def test_apply_mask_examples():
    spec = mlp_spec(3, [], 1)
    layout = init_weights(spec, 0).layout
    state = ModelState(np.array([1.0, -2.0, 3.0, 0.5]), layout)  # 3 weights + bias
    mask = Mask(np.array([1, 0, 1], dtype=np.uint8), 2 / 3)
    out = apply_mask(state, mask)
    np.testing.assert_array_equal(out.params, [1.0, 0.0, 3.0, 0.5])
    # all-ones identity and idempotence
    np.testing.assert_array_equal(apply_mask(state, Mask.ones(3)).params, state.params)
    np.testing.assert_array_equal(apply_mask(out, mask).params, out.params)


def test_apply_mask_layout_mismatch():
    spec = mlp_spec(3, [], 1)
    state = init_weights(spec, 0)
    with pytest.raises(LayoutError):
        apply_mask(state, Mask.ones(7))


def test_mask_cardinality_invariant_checked():
    with pytest.raises(LayoutError):
        Mask(np.array([1, 1, 1, 1], dtype=np.uint8), 0.5)


def test_magnitude_mask_example_and_ties():
    spec = mlp_spec(4, [], 1)
    layout = init_weights(spec, 0).layout
    state = ModelState(np.array([0.5, -0.9, 0.1, 0.3, 0.0]), layout)
    np.testing.assert_array_equal(magnitude_mask(state, 0.5).bits, [1, 1, 0, 0])
    np.testing.assert_array_equal(magnitude_mask(state, 1.0).bits, [1, 1, 1, 1])
    # ties at the threshold: lower flat index wins
    tied = ModelState(np.array([0.7, 0.7, 0.7, 0.1, 0.0]), layout)
    np.testing.assert_array_equal(magnitude_mask(tied, 0.5).bits, [1, 1, 0, 0])


def test_iterative_schedule():
    assert iterative_prune_schedule(0, 0.25, 2) == 1.0
    assert iterative_prune_schedule(2, 0.25, 2) == 0.25
    assert iterative_prune_schedule(5, 0.25, 2) == 0.25
    assert iterative_prune_schedule(1, 0.25, 2) == pytest.approx(0.5, rel=1e-15)
    with pytest.raises(ConfigError):
        iterative_prune_schedule(1, 0.0, 2)
    with pytest.raises(ConfigError):
        iterative_prune_schedule(-1, 0.5, 2)
