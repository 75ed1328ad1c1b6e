import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from icpolypseg.config import LossConfig
from icpolypseg.errors import ContractViolation
from icpolypseg.network import PredictionSet
from icpolypseg.objective import pixel_weights, weighted_bce, weighted_iou, deep_supervised_loss


def _square(size=16, lo=6, hi=10):
    gt = torch.zeros(1, 1, size, size)
    gt[..., lo:hi, lo:hi] = 1.0
    return gt


def _window_weights(gt: np.ndarray, k: int, gain: float) -> np.ndarray:
    h, w = gt.shape
    r = k // 2
    out = np.zeros_like(gt)
    for y in range(h):
        for x in range(w):
            win = gt[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1]
            out[y, x] = 1.0 + gain * abs(win.mean() - gt[y, x])
    return out


def _loop_loss(pred: np.ndarray, gt: np.ndarray, w: np.ndarray) -> float:
    num = den = inter = union = 0.0
    for p, g, wi in zip(pred.ravel(), gt.ravel(), w.ravel()):
        num += wi * -(g * math.log(p) + (1 - g) * math.log(1 - p))
        den += wi
        inter += p * g * wi
        union += (p + g) * wi
    return num / den + 1.0 - (inter + 1.0) / (union - inter + 1.0)


@pytest.mark.parametrize("fill", [0.0, 1.0])
def test_uniform_masks_have_unit_weights(fill):
    gt = torch.full((2, 1, 12, 12), fill)
    assert torch.equal(pixel_weights(gt, LossConfig(weight_kernel=5)), torch.ones_like(gt))


def test_weights_match_sliding_window(double_precision):
    gt = _square()
    got = pixel_weights(gt, LossConfig(weight_kernel=3, weight_gain=5.0))[0, 0].numpy()
    expected = _window_weights(gt[0, 0].numpy(), 3, 5.0)
    assert np.max(np.abs(got - expected)) < 1e-12
    # interior of the square and far background are flat
    assert got[8, 8] == 1.0 and got[0, 0] == 1.0
    assert got[6, 6] > 1.0


def test_weights_bounded_and_monotone_in_gain():
    gt = _square(size=32, lo=10, hi=20)
    lo = pixel_weights(gt, LossConfig(weight_kernel=7, weight_gain=1.0))
    hi = pixel_weights(gt, LossConfig(weight_kernel=7, weight_gain=5.0))
    assert torch.all(lo >= 1.0) and torch.all(hi <= 6.0)
    assert torch.all(hi >= lo)


def test_perfect_prediction_has_zero_iou_term():
    gt = _square()
    w = pixel_weights(gt, LossConfig(weight_kernel=3))
    assert weighted_iou(gt.clone(), gt, w).item() == 0.0
    empty = torch.zeros(1, 1, 8, 8)
    assert weighted_iou(empty.clone(), empty, torch.ones_like(empty)).item() == 0.0


def test_half_probability_on_background_gives_ln2():
    gt = torch.zeros(1, 1, 8, 8)
    pred = torch.full_like(gt, 0.5)
    cfg = LossConfig(weight_kernel=3, terms=["weighted_bce"])
    total, breakdown = deep_supervised_loss({"p2": pred}, gt, cfg)
    assert total.item() == pytest.approx(math.log(2), abs=1e-6)
    assert breakdown == {"p2": pytest.approx(math.log(2), abs=1e-6)}


@given(seed=st.integers(0, 10_000))
@settings(deadline=None)
def test_loss_matches_scalar_loop(seed):
    rng = np.random.default_rng(seed)
    gt_np = (rng.random((1, 1, 9, 9)) > 0.6).astype(np.float64)
    pred_np = rng.uniform(0.05, 0.95, size=(1, 1, 9, 9))
    gt = torch.from_numpy(gt_np)
    logits = torch.logit(torch.from_numpy(pred_np))
    cfg = LossConfig(weight_kernel=3)
    w = pixel_weights(gt, cfg)
    got = (weighted_bce(logits, gt, w) + weighted_iou(torch.sigmoid(logits), gt, w)).item()
    expected = _loop_loss(pred_np, gt_np, w.numpy())
    assert abs(got - expected) < 1e-9


def test_loss_gradcheck(double_precision):
    torch.manual_seed(0)
    gt = (torch.rand(1, 1, 6, 6) > 0.5).to(torch.float64)
    w = pixel_weights(gt, LossConfig(weight_kernel=3))
    logits = torch.empty(1, 1, 6, 6).uniform_(-3.0, 3.0).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda z: weighted_bce(z, gt, w) + weighted_iou(torch.sigmoid(z), gt, w), (logits,))


def test_deep_supervision_sums_weighted_heads():
    gt = _square()
    torch.manual_seed(1)
    heads = {name: torch.rand(1, 1, 16, 16).clamp(0.05, 0.95) for name in ("p5", "p4", "p3", "p2", "p1")}
    cfg = LossConfig(weight_kernel=3, supervision_weights={"p5": 0.5, "p4": 1.0, "p3": 1.0, "p2": 1.0, "p1": 2.0})
    total, breakdown = deep_supervised_loss(PredictionSet(probs=heads), gt, cfg)
    expected = sum(cfg.supervision_weights[n] * v for n, v in breakdown.items())
    assert total.item() == pytest.approx(expected, rel=1e-5)
    assert set(breakdown) == set(heads)


def test_loss_rejects_bad_inputs():
    gt = _square()
    cfg = LossConfig(weight_kernel=3)
    with pytest.raises(ContractViolation):
        deep_supervised_loss({}, gt, cfg)
    with pytest.raises(ContractViolation):
        deep_supervised_loss({"p2": torch.rand(1, 1, 8, 8)}, gt, cfg)
    with pytest.raises(ContractViolation):
        deep_supervised_loss({"p2": torch.rand(1, 1, 16, 16)}, gt * 0.5, cfg)


def test_saturated_wrong_head_still_has_gradient():
    gt = torch.zeros(1, 1, 10, 10)
    logits = torch.full((1, 1, 10, 10), 20.0, requires_grad=True)
    cfg = LossConfig(weight_kernel=3, terms=["weighted_bce"])
    total, _ = deep_supervised_loss(PredictionSet.from_logits({"p2": logits}), gt, cfg)
    total.backward()
    assert total.item() == pytest.approx(20.0, rel=1e-6)
    # d/dz of BCE is sigmoid(z) - gt, spread over 100 equally weighted pixels
    assert torch.allclose(logits.grad, torch.full_like(logits, 0.01), rtol=1e-5)


def test_logits_and_probabilities_score_alike():
    gt = _square()
    torch.manual_seed(2)
    logits = torch.randn(1, 1, 16, 16) * 2
    cfg = LossConfig(weight_kernel=3)
    from_logits, _ = deep_supervised_loss(PredictionSet.from_logits({"p2": logits}), gt, cfg)
    from_probs, _ = deep_supervised_loss({"p2": torch.sigmoid(logits)}, gt, cfg)
    assert from_logits.item() == pytest.approx(from_probs.item(), rel=1e-3)


@given(seed=st.integers(0, 10_000), spread=st.floats(0.1, 40.0))
@settings(deadline=None)
def test_loss_is_never_negative(seed, spread):
    gen = torch.Generator().manual_seed(seed)
    gt = (torch.rand(2, 1, 12, 12, generator=gen) > 0.5).float()
    logits = torch.randn(2, 1, 12, 12, generator=gen) * spread
    preds = PredictionSet.from_logits({"p2": logits, "p1": -logits})
    total, breakdown = deep_supervised_loss(preds, gt, LossConfig(weight_kernel=5))
    assert total.item() >= 0.0
    assert all(v >= 0.0 for v in breakdown.values())


@given(
    seed=st.integers(0, 10_000),
    pixel=st.tuples(st.integers(0, 7), st.integers(0, 7)),
    confidence=st.floats(0.51, 0.99),
)
@settings(deadline=None)
def test_flipping_a_correct_pixel_never_lowers_the_loss(seed, pixel, confidence):
    rng = np.random.default_rng(seed)
    gt = torch.from_numpy((rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64))
    # every pixel starts on the right side of 0.5
    right = rng.uniform(0.5, 0.99, size=(1, 1, 8, 8))
    pred = torch.from_numpy(np.where(gt.numpy() == 1, right, 1.0 - right))
    y, x = pixel
    pred[0, 0, y, x] = confidence if gt[0, 0, y, x] == 1 else 1.0 - confidence
    cfg = LossConfig(weight_kernel=3)
    before, _ = deep_supervised_loss({"p2": pred}, gt, cfg)
    flipped = pred.clone()
    flipped[0, 0, y, x] = 1.0 - pred[0, 0, y, x]
    after, _ = deep_supervised_loss({"p2": flipped}, gt, cfg)
    assert after.item() >= before.item()
