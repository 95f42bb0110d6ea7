import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from kanoclip.adapter import ConvAdapter, adapt_global, global_score, score_terms
from kanoclip.errors import InvalidConfig, NonFiniteLoss, OutOfRangeScore, ShapeMismatch
from kanoclip.losses import LossWeights, dice_loss, focal_loss, global_loss, local_loss, total_loss

from oracles import naive_layer_norm


def d64(x):
    return torch.tensor(x, dtype=torch.float64)


# focal / dice / local ------------------------------------------------------


def test_focal_half_probability():
    assert float(focal_loss(d64([0.5]), d64([1.0]))) == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert float(focal_loss(d64([0.5]), d64([1.0]))) == pytest.approx(0.173287, abs=1e-6)
    assert float(focal_loss(d64([0.5]), d64([0.0]))) == pytest.approx(0.173287, abs=1e-6)


def test_focal_perfect_prediction():
    g = d64([[1.0, 0.0], [0.0, 1.0]])
    assert float(focal_loss(g.clone(), g)) < 1e-12


def test_dice_hand_values():
    assert float(dice_loss(d64([1.0, 0.0]), d64([0.0, 1.0]))) == pytest.approx(2 / 3, abs=1e-12)
    assert float(dice_loss(d64([1.0, 1.0]), d64([1.0, 0.0]))) == pytest.approx(0.25, abs=1e-12)
    k = torch.zeros(400, dtype=torch.float64)
    k[:100] = 1
    assert float(dice_loss(k, k)) == 0.0


def test_dice_per_image_then_mean():
    p = d64([[[1.0, 0.0]], [[1.0, 1.0]]])
    t = d64([[[0.0, 1.0]], [[1.0, 0.0]]])
    assert float(dice_loss(p, t)) == pytest.approx((2 / 3 + 0.25) / 2, abs=1e-12)


def test_local_loss_hand_value():
    half = torch.full((1, 2, 2), 0.5, dtype=torch.float64)
    g = d64([[[1.0, 1.0], [0.0, 0.0]]])
    expected = 0.25 * math.log(2) + 0.4 + 0.4
    assert float(local_loss(half, half.clone(), g)) == pytest.approx(expected, abs=1e-12)
    assert float(local_loss(half, half.clone(), g)) == pytest.approx(0.973287, abs=1e-6)


def test_local_loss_perfect_maps():
    g = d64([[[1.0, 0.0], [0.0, 0.0]]])
    assert float(local_loss(g.clone(), 1 - g, g)) < 1e-12


def test_shape_mismatches():
    with pytest.raises(ShapeMismatch):
        focal_loss(torch.zeros(2), torch.zeros(3))
    with pytest.raises(ShapeMismatch):
        dice_loss(torch.zeros(2, 2), torch.zeros(2, 3))
    with pytest.raises(ShapeMismatch):
        local_loss(torch.zeros(1, 2, 2), torch.zeros(1, 2, 2), torch.zeros(1, 3, 2))


prob_maps = st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4)
masks = st.lists(st.sampled_from([0.0, 1.0]), min_size=4, max_size=4)


@settings(max_examples=100, deadline=None)
@given(prob_maps, prob_maps, masks)
def test_losses_finite_and_nonnegative(pa, pn, g):
    a, n, m = (d64(v).reshape(1, 2, 2) for v in (pa, pn, g))
    for value in (focal_loss(a, m), dice_loss(n, 1 - m), local_loss(a, n, m)):
        assert math.isfinite(float(value)) and float(value) >= 0


@settings(max_examples=100, deadline=None)
@given(prob_maps, prob_maps)
def test_dice_symmetry(p, t):
    p, t = d64(p), d64(t)
    assert float(dice_loss(p, t)) == pytest.approx(float(dice_loss(t, p)), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=6), st.data())
def test_focal_gamma_zero_is_bce(p, data):
    g = data.draw(st.lists(st.sampled_from([0.0, 1.0]), min_size=len(p), max_size=len(p)))
    bce = -np.mean([gi * math.log(pi) + (1 - gi) * math.log(1 - pi) for pi, gi in zip(p, g)])
    assert float(focal_loss(d64(p), d64(g), gamma=0, eps=None)) == pytest.approx(bce, abs=1e-9)


# global / total ------------------------------------------------------------


def test_bce_values():
    assert float(global_loss(d64([0.5]), d64([1.0]))) == pytest.approx(math.log(2), abs=1e-12)
    assert float(global_loss(d64([0.5]), d64([0.0]))) == pytest.approx(0.693147, abs=1e-6)
    assert float(global_loss(d64([0.9]), d64([1.0]))) == pytest.approx(0.105361, abs=1e-6)
    assert float(global_loss(d64([1 - 1e-7]), d64([1.0]))) < 1e-6


def test_bce_batch_mean():
    got = float(global_loss(d64([0.9, 0.2]), d64([1.0, 0.0])))
    assert got == pytest.approx((-math.log(0.9) - math.log(0.8)) / 2, abs=1e-12)


@pytest.mark.parametrize("score", [-0.1, 1.5])
def test_bce_out_of_range(score):
    with pytest.raises(OutOfRangeScore):
        global_loss(d64([score]), d64([1.0]))


def test_total_loss():
    assert total_loss(0.2, 0.3, 0.5) == pytest.approx(1.0, abs=1e-12)
    assert total_loss(0.0, 0.0, 0.0) == 0.0
    assert total_loss(0.2, 0.3, 0.5, LossWeights(1, 1, 0)) == pytest.approx(0.5, abs=1e-12)
    assert total_loss(0.2, 0.3, 0.5, LossWeights(2, 0.5, 1)) == pytest.approx(1.05, abs=1e-12)


@pytest.mark.parametrize("bad", [float("nan"), float("inf")])
def test_total_loss_non_finite(bad):
    with pytest.raises(NonFiniteLoss):
        total_loss(torch.tensor(bad, requires_grad=True), 0.0, 0.0)


def test_loss_weights_validated():
    assert (LossWeights().alpha, LossWeights().beta, LossWeights().gamma) == (1.0, 1.0, 1.0)
    with pytest.raises(InvalidConfig):
        LossWeights(alpha=-1)


# adapter -------------------------------------------------------------------


def test_zero_down_projection_gives_zero():
    adapter = ConvAdapter(8).double()
    with torch.no_grad():
        adapter.W_down.zero_()
    assert torch.count_nonzero(adapt_global(torch.randn(3, 8, dtype=torch.float64), adapter)) == 0


def test_two_dim_hand_oracle():
    adapter = ConvAdapter(2, d_bottle=1).double()
    w_down, w_up = np.array([[1.0], [0.0]]), np.array([[2.0, -3.0]])
    with torch.no_grad():
        adapter.W_down.copy_(torch.tensor(w_down))
        adapter.W_up.copy_(torch.tensor(w_up))
    x = np.array([[1.0, -1.0]])
    ln = naive_layer_norm(x, [1.0, 1.0], [0.0, 0.0])
    assert ln[0] == pytest.approx([1.0, -1.0], abs=1e-5)
    expected = np.maximum(ln @ w_down, 0) @ w_up
    got = adapt_global(torch.tensor(x), adapter).detach().numpy()
    assert np.abs(got - expected).max() < 1e-12


def test_adapter_shapes_and_zero_input():
    adapter = ConvAdapter(16)
    assert adapter.W_down.shape == (16, 4)
    assert tuple(adapter(torch.randn(5, 16)).shape) == (5, 16)
    assert torch.isfinite(adapter(torch.zeros(16))).all()
    with pytest.raises(ShapeMismatch):
        adapter(torch.zeros(3, 8))
    with pytest.raises(InvalidConfig):
        ConvAdapter(4, d_bottle=5)
    with pytest.raises(InvalidConfig):
        ConvAdapter(4, d_bottle=0)


def test_adapter_residual_flag():
    adapter = ConvAdapter(4, residual=True).double()
    with torch.no_grad():
        adapter.W_down.zero_()
    x = torch.randn(4, dtype=torch.float64)
    assert torch.equal(adapter(x), x)


def _text(normal_logit, abnormal_logit):
    # unit feature along x, rows scaled so that the dot products are the logits
    return d64([[normal_logit, 0.0], [abnormal_logit, 0.0]])


def test_score_hand_values():
    feat = d64([1.0, 0.0])
    rec = global_score(feat, _text(0.0, math.log(3)), torch.full((4, 4), 0.2, dtype=torch.float64))
    assert rec.abnormal_prob == pytest.approx(0.75, abs=1e-12)
    assert rec.S_global == pytest.approx(0.95, abs=1e-12)
    assert rec.S_global == rec.abnormal_prob + rec.map_max
    rec = global_score(feat, _text(1.0, 1.0), torch.zeros(3, 3, dtype=torch.float64))
    assert rec.S_global == pytest.approx(0.5, abs=1e-12)
    rec = global_score(feat, _text(0.0, -50.0), torch.zeros(3, 3, dtype=torch.float64))
    assert rec.S_global < 1e-20


def test_score_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        score_terms(torch.zeros(3), torch.zeros(2, 4), torch.zeros(2, 2))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(0, 1), min_size=9, max_size=9), st.integers(0, 8), st.floats(0, 1))
def test_score_range_and_monotone(feat, pixels, idx, bump):
    text = torch.nn.functional.normalize(d64([[1.0, 0.5, -0.2], [0.1, -1.0, 0.3]]), dim=-1)
    m = d64(pixels).reshape(3, 3)
    s, p, mx = score_terms(d64(feat), text, m)
    assert 0 <= float(s) <= 2 and 0 < float(p) < 1
    logits = text @ d64(feat)
    both = torch.softmax(logits, -1)
    assert float(both.sum()) == pytest.approx(1.0, abs=1e-9)
    raised = m.clone().reshape(-1)
    raised[idx] = min(1.0, raised[idx].item() + bump)
    assert float(score_terms(d64(feat), text, raised.reshape(3, 3))[0]) >= float(s)
