import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epicodec import diffengine as de
from epicodec.diffengine import Tensor, backward
from epicodec.diffengine.gradcheck import check_gradients
from gradcases import projected
from epicodec.quantizer import (ProbabilityModel, QuantizerError, QuantizerSpec, dequantize, entropy,
                                estimate_probs, hard_quantize, rate_loss, soft_quantize)

FIVE = QuantizerSpec(levels=5, lo=-1.0, hi=1.0)


def test_default_spec():
    s = QuantizerSpec()
    assert s.levels == 90000 and (s.lo, s.hi) == (-1.0, 1.0)
    assert s.softness == pytest.approx(50.0)
    d = np.diff(s.centers)
    assert np.all(d > 0)
    np.testing.assert_allclose(d, s.spacing, rtol=1e-9)


def test_centers_evenly_spaced_small():
    np.testing.assert_allclose(np.diff(FIVE.centers), FIVE.spacing, rtol=1e-12)


@pytest.mark.parametrize("kwargs", [dict(levels=1), dict(lo=1.0, hi=1.0), dict(window=4), dict(sigma=-1.0)])
def test_invalid_spec_rejected(kwargs):
    with pytest.raises(QuantizerError):
        QuantizerSpec(**kwargs)


def test_nearest_center():
    assert hard_quantize(np.array([0.31]), FIVE)[0] == 3


def test_midpoint_goes_to_lower_index():
    assert hard_quantize(np.array([0.25]), FIVE)[0] == 2
    assert hard_quantize(np.array([-0.75]), FIVE)[0] == 0


def test_out_of_range_clamps():
    np.testing.assert_array_equal(hard_quantize(np.array([-3.0, 7.0]), FIVE), [0, 4])


def test_dequantize_endpoints_and_fixed_points():
    s = QuantizerSpec(levels=257)
    assert dequantize(np.array([0]), s)[0] == s.lo
    idx = np.arange(s.levels)
    np.testing.assert_array_equal(hard_quantize(dequantize(idx, s), s), idx)


def test_dequantize_rejects_bad_index():
    with pytest.raises(QuantizerError):
        dequantize(np.array([5]), FIVE)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=1, max_size=40), st.integers(2, 500))
def test_round_trip_error_bounded(values, levels):
    s = QuantizerSpec(levels=levels)
    z = np.array(values)
    err = np.abs(z - dequantize(hard_quantize(z, s), s))
    assert np.all(err <= s.spacing / 2 + 1e-12)


def test_soft_at_center_equals_center():
    s = QuantizerSpec(levels=1001)
    z = s.centers[[0, 17, 500, 1000]]
    np.testing.assert_allclose(soft_quantize(Tensor(z), s).data, z, atol=1e-9, rtol=0)


def test_small_sigma_with_window_three_is_neighbour_mean():
    s = QuantizerSpec(levels=11, sigma=1e-12, window=3)
    z = np.array([0.03, -0.41])
    k = hard_quantize(z, s)
    expected = (s.centers[k - 1] + s.centers[k] + s.centers[k + 1]) / 3
    np.testing.assert_allclose(soft_quantize(Tensor(z), s).data, expected, atol=1e-9)


def test_soft_gap_shrinks_with_sigma():
    base = QuantizerSpec(levels=1000)
    z = np.random.default_rng(0).uniform(-1, 1, 5000)
    hard = dequantize(hard_quantize(z, base), base)
    gaps = [np.abs(soft_quantize(Tensor(z), base.with_softness(k)).data - hard).max() for k in (1, 5, 10, 50)]
    assert all(a >= b for a, b in zip(gaps, gaps[1:]))


def test_soft_gap_near_centers_is_negligible_at_default_sigma():
    s = QuantizerSpec(levels=1000)
    rng = np.random.default_rng(1)
    z = s.centers[rng.integers(0, 1000, 2000)] + rng.uniform(-0.3, 0.3, 2000) * s.spacing
    z = np.clip(z, s.lo, s.hi)
    gap = np.abs(soft_quantize(Tensor(z), s).data - dequantize(hard_quantize(z, s), s))
    assert gap.max() < 1e-6 * s.spacing


def test_soft_at_midpoint_is_midpoint():
    # equal weights on both neighbours whatever sigma is
    s = QuantizerSpec(levels=5)
    np.testing.assert_allclose(soft_quantize(Tensor(np.array([0.25])), s).data, [0.25], atol=1e-12)


@pytest.mark.parametrize("softness", [1.0, 50.0])
def test_windowed_sum_matches_full_sum(softness):
    s = QuantizerSpec(levels=64, window=9).with_softness(softness)
    z = np.random.default_rng(2).uniform(-1, 1, 3000)
    d = z[:, None] - s.centers[None, :]
    logits = -s.sigma * d * d
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    full = (w * s.centers).sum(axis=1) / w.sum(axis=1)
    windowed = soft_quantize(Tensor(z), s).data
    tol = 1e-12 if softness == 50.0 else 1e-6
    assert np.abs(windowed - full).max() < tol


def test_soft_gradient_matches_finite_differences():
    s = QuantizerSpec(levels=16).with_softness(2.0)
    z = Tensor(np.random.default_rng(3).uniform(-0.95, 0.95, (1, 3, 3, 2)), requires_grad=True)
    assert check_gradients(projected(lambda a: soft_quantize(a, s), z.shape, 0), [z]) < 1e-4


@pytest.mark.parametrize("softness", [0.5, 1.0, 10.0, 50.0])
def test_soft_gradient_bounded(softness):
    # the derivative is 2 sigma Var_w(c), and the window variance is at most (W spacing / 2)^2
    s = QuantizerSpec(levels=256, window=9).with_softness(softness)
    z = Tensor(np.random.default_rng(4).uniform(-1, 1, 4000), requires_grad=True)
    (g,) = backward(de.reduce_sum(soft_quantize(z, s)), [z])
    assert np.all(np.isfinite(g))
    assert np.abs(g).max() <= 2 * softness * (9 / 2) ** 2


# -- probability model and entropy --

def test_point_mass():
    s = QuantizerSpec(levels=32)
    p = estimate_probs(np.full(100, s.centers[7]), s).probs
    assert p[7] == pytest.approx(1.0, abs=1e-12)
    assert entropy(estimate_probs(np.full(100, s.centers[7]), s)) == pytest.approx(0.0, abs=1e-9)


def test_uniform_on_centers():
    s = QuantizerSpec(levels=32)
    p = estimate_probs(s.centers, s)
    np.testing.assert_allclose(p.probs, 1 / 32, atol=1e-12)
    assert entropy(p) == pytest.approx(math.log(32), rel=1e-9)


def test_probs_normalized():
    s = QuantizerSpec(levels=100).with_softness(1.0)
    p = estimate_probs(np.random.default_rng(5).uniform(-1, 1, 777), s)
    assert p.probs.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(p.probs >= 0)


def test_binary_entropy():
    assert entropy(ProbabilityModel(np.array([0.5, 0.5]))) == pytest.approx(math.log(2))


def test_estimate_probs_permutation_invariant():
    s = QuantizerSpec(levels=50).with_softness(3.0)
    z = np.random.default_rng(6).uniform(-1, 1, (4, 5, 6))
    a = estimate_probs(z, s).probs
    b = estimate_probs(np.random.default_rng(7).permutation(z.reshape(-1)), s).probs
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_rate_loss_bounds():
    s = QuantizerSpec(levels=16).with_softness(1.0)
    z = np.random.default_rng(8).uniform(-1, 1, (2, 4, 4, 3))
    assert 0 <= float(rate_loss(Tensor(z), s).data) <= math.log(16) + 1e-12
    assert float(rate_loss(Tensor(np.full(50, s.centers[3])), QuantizerSpec(levels=16)).data) == pytest.approx(0, abs=1e-9)


def test_rate_loss_equals_entropy_of_estimate():
    s = QuantizerSpec(levels=40).with_softness(2.0)
    z = np.random.default_rng(9).uniform(-1, 1, 300)
    assert float(rate_loss(Tensor(z), s).data) == pytest.approx(entropy(estimate_probs(z, s)), rel=1e-12)


def test_rate_loss_gradient_at_t16():
    s = QuantizerSpec(levels=16).with_softness(1.0)
    z = Tensor(np.random.default_rng(10).uniform(-0.9, 0.9, (1, 4, 4, 2)), requires_grad=True)
    assert check_gradients(lambda a: rate_loss(a, s), [z]) < 1e-4


def test_empty_latent_rejected():
    with pytest.raises(QuantizerError):
        estimate_probs(np.zeros(0), QuantizerSpec(levels=4))
