import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tendo.gradcheck import check_hybrid_loss
from tendo.objective import LossConfig, batch_hybrid_loss, hybrid_loss, hybrid_loss_grad

shapes = st.tuples(st.integers(1, 6), st.integers(1, 6))


@st.composite
def pg_pairs(draw):
    shape = draw(shapes)
    p = draw(arrays(np.float64, shape, elements=st.floats(1e-6, 1.0)))
    g = draw(arrays(np.int8, shape, elements=st.integers(0, 1)))
    return p, g


def test_all_ones_half_prediction():
    # 1 - (2*2 + 1)/(1 + 4 + 1) + ln 2
    assert hybrid_loss(np.full((2, 2), 0.5), np.ones((2, 2))) == pytest.approx(1 - 5 / 6 + math.log(2), abs=1e-12)
    assert hybrid_loss(np.full((2, 2), 0.5), np.ones((2, 2))) == pytest.approx(0.85981, abs=1e-5)


def test_all_zero_truth():
    assert hybrid_loss(np.full((2, 2), 0.5), np.zeros((2, 2))) == pytest.approx(0.5, abs=1e-15)


def test_exact_match_is_zero_even_when_empty():
    assert hybrid_loss(np.zeros((4, 4)), np.zeros((4, 4))) == 0.0
    g = np.eye(5)
    assert hybrid_loss(g.copy(), g) == 0.0


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        hybrid_loss(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        hybrid_loss(np.zeros((2, 2)), np.full((2, 2), 0.5))
    with pytest.raises(ValueError):
        LossConfig(epsilon=0)
    with pytest.raises(ValueError):
        LossConfig(delta=0.5)


def test_zero_truth_gradient_is_dice_only():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.1, 0.9, (4, 4))
    nu = 1.0
    d = np.sum(p * p) + 1.0
    np.testing.assert_allclose(hybrid_loss_grad(p, np.zeros_like(p)), 2 * p * nu / d ** 2, rtol=1e-13)
    assert np.all(hybrid_loss_grad(p, np.zeros_like(p)) >= 0)


def test_constant_inputs_give_constant_gradient():
    grad = hybrid_loss_grad(np.full((3, 5), 0.3), np.ones((3, 5)))
    assert np.all(grad == grad.flat[0])


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(10):
        p = rng.uniform(0.05, 0.95, (8, 8))
        g = (rng.random((8, 8)) < 0.5).astype(float)
        assert check_hybrid_loss(p, g) < 1e-4


def test_clamped_pixels_have_no_log_gradient():
    p = np.array([[0.0, 0.5]])
    g = np.array([[1, 1]])
    cfg = LossConfig()
    grad = hybrid_loss_grad(p, g, cfg)
    den = 0.25 + 2 + 1
    assert grad[0, 0] == pytest.approx(-(2 * den) / den ** 2, rel=1e-12)
    assert np.isfinite(hybrid_loss(p, g))


def test_batch_is_mean_of_images():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.01, 1, (3, 4, 4))
    g = (rng.random((3, 4, 4)) < 0.4).astype(int)
    assert batch_hybrid_loss(p, g) == pytest.approx(np.mean([hybrid_loss(a, b) for a, b in zip(p, g)]))


@given(pg_pairs())
def test_non_negative(pair):
    p, g = pair
    assert hybrid_loss(p, g) >= 0


@given(pg_pairs(), st.integers(0, 2 ** 31))
def test_minimum_at_truth(pair, seed):
    _, g = pair
    rng = np.random.default_rng(seed)
    p = np.clip(g + rng.normal(0, 0.2, g.shape), 1e-6, 1.0)
    assert hybrid_loss(g.astype(float), g) <= hybrid_loss(p, g)


@given(pg_pairs(), st.integers(0, 2 ** 31))
def test_first_order_taylor(pair, seed):
    p, g = pair
    p = np.clip(p, 0.05, 0.95)
    d = np.random.default_rng(seed).standard_normal(p.shape)
    errs = []
    for h in (1e-3, 1e-4):
        errs.append(abs(hybrid_loss(p + h * d, g) - hybrid_loss(p, g) - h * np.sum(hybrid_loss_grad(p, g) * d)))
    # second order: a tenfold smaller step shrinks the error about a hundredfold
    assert errs[1] <= errs[0] / 20 + 1e-12


@given(pg_pairs(), st.integers(0, 2 ** 31))
def test_permutation_equivariance(pair, seed):
    p, g = pair
    perm = np.random.default_rng(seed).permutation(p.size)
    pp, gp = p.ravel()[perm].reshape(p.shape), g.ravel()[perm].reshape(g.shape)
    assert hybrid_loss(pp, gp) == pytest.approx(hybrid_loss(p, g), rel=1e-12, abs=1e-15)
    np.testing.assert_allclose(hybrid_loss_grad(pp, gp).ravel(), hybrid_loss_grad(p, g).ravel()[perm], rtol=1e-12)
