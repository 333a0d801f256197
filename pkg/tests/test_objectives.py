import math

import numpy as np
import pytest
import torch

from spdnet.core_types import ModelConfig
from spdnet.objectives import (
    dense_loss,
    huber,
    joint_loss,
    parse_log_line,
    pose_loss,
    seg_loss,
)

from oracles import central_difference, relative_error, softmax_nll


def test_seg_loss_perfect_is_zero():
    target = torch.tensor([[[0, 3], [2, 1]]])
    logits = torch.full((1, 4, 2, 2), -1e4, dtype=torch.float64)
    logits.scatter_(1, target.unsqueeze(1), 0.0)
    assert seg_loss(logits, target).item() == 0.0


def test_seg_loss_uniform_is_log_k():
    expected = softmax_nll([0.0] * 19, 4)
    assert math.isclose(expected, math.log(19), rel_tol=1e-12)
    loss = seg_loss(torch.zeros(2, 19, 3, 5, dtype=torch.float64), torch.randint(0, 19, (2, 3, 5)))
    assert math.isclose(loss.item(), expected, rel_tol=1e-12)
    assert abs(loss.item() - 2.944) < 1e-3


def test_seg_loss_single_pixel_two_classes():
    logits = torch.tensor([0.0, math.log(3.0)], dtype=torch.float64).view(1, 2, 1, 1)
    loss = seg_loss(logits, torch.tensor([[[1]]]))
    assert math.isclose(loss.item(), -math.log(0.75), rel_tol=1e-12)
    assert abs(loss.item() - 0.2877) < 1e-4


def test_seg_loss_rejects_bad_class():
    with pytest.raises(ValueError):
        seg_loss(torch.zeros(1, 3, 2, 2), torch.full((1, 2, 2), 3))


def test_pose_loss_zero_when_exact():
    joints = torch.rand(1, 16, 2) * 63
    pred = joints / 63
    res = pose_loss(pred, joints, torch.ones(1, 16, dtype=torch.bool), (64, 64))
    assert res.supervised and res.value.item() == pytest.approx(0.0, abs=1e-12)


def test_pose_loss_uniform_offset():
    joints = torch.rand(1, 16, 2, dtype=torch.float64) * 63
    pred = joints / 63 + torch.tensor([0.1, 0.0], dtype=torch.float64)
    res = pose_loss(pred, joints, torch.ones(1, 16, dtype=torch.bool), (64, 64))
    # (1 / 32) * 16 * 0.01
    assert res.value.item() == pytest.approx(0.005, rel=1e-12)


def test_pose_loss_counts_visible_only():
    joints = torch.zeros(1, 16, 2, dtype=torch.float64)
    pred = torch.full((1, 16, 2), 0.5, dtype=torch.float64)
    vis = torch.zeros(1, 16, dtype=torch.bool)
    vis[0, 3] = True
    pred[0, 3] = torch.tensor([0.2, 0.0])
    res = pose_loss(pred, joints, vis, (64, 64))
    assert res.value.item() == pytest.approx(0.04 / 2)


def test_pose_loss_no_visible_joints():
    res = pose_loss(torch.rand(2, 16, 2), torch.rand(2, 16, 2), torch.zeros(2, 16, dtype=torch.bool), (64, 64))
    assert res.value.item() == 0.0
    assert not res.supervised


def test_huber_regimes():
    assert huber(torch.tensor(0.3, dtype=torch.float64)).item() == pytest.approx(0.045)
    assert huber(torch.tensor(2.0)).item() == pytest.approx(1.5)
    assert huber(torch.tensor(-2.0)).item() == pytest.approx(1.5)


@pytest.mark.parametrize("delta", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("eps", [1e-3, 1e-6])
def test_huber_continuous_at_switch(delta, eps):
    lo = huber(torch.tensor(delta - eps, dtype=torch.float64), delta).item()
    hi = huber(torch.tensor(delta + eps, dtype=torch.float64), delta).item()
    mid = huber(torch.tensor(delta, dtype=torch.float64), delta).item()
    assert abs(hi - lo) <= 2 * eps * delta + 1e-15
    assert abs(mid - 0.5 * delta**2) < 1e-15


def _one_pixel(cse_value, residual_u, residual_v=0.0, form="product"):
    # two-way classification with target 1 and CE exactly cse_value
    other = math.log(math.exp(cse_value) - 1.0)
    logits = torch.tensor([other, 0.0], dtype=torch.float64).view(1, 2, 1, 1)
    target_parts = torch.tensor([[[1]]])
    target_uv = torch.full((1, 2, 1, 1), 0.5, dtype=torch.float64)
    uv = target_uv + torch.tensor([residual_u, residual_v], dtype=torch.float64).view(1, 2, 1, 1)
    return dense_loss(logits, uv, target_parts, target_uv, form=form).item()


def test_dense_loss_product_example():
    assert _one_pixel(0.5, 0.3) == pytest.approx(0.5 * 0.3**2 / 2)
    assert _one_pixel(0.5, 0.3) == pytest.approx(0.0225)


def test_dense_loss_sum_form():
    assert _one_pixel(0.5, 0.3, form="sum") == pytest.approx(0.5 + 0.045)


def test_dense_loss_perfect():
    logits = torch.full((1, 3, 2, 2), -1e4, dtype=torch.float64)
    parts = torch.tensor([[[0, 1], [2, 0]]])
    logits.scatter_(1, parts.unsqueeze(1), 0.0)
    uv = torch.rand(1, 2, 2, 2, dtype=torch.float64)
    assert dense_loss(logits, uv, parts, uv.clone()).item() == 0.0


def test_dense_loss_background_term():
    # one background pixel with uniform logits: pure classification term ln(P + 1)
    logits = torch.zeros(1, 25, 1, 2, dtype=torch.float64)
    parts = torch.tensor([[[0, 5]]])
    uv = torch.zeros(1, 2, 1, 2, dtype=torch.float64)
    target_uv = torch.zeros_like(uv)
    target_uv[0, :, 0, 1] = 0.5
    expected_fg = math.log(25) * 2 * (0.5**2 / 2)
    assert dense_loss(logits, uv, parts, target_uv).item() == pytest.approx(math.log(25) + expected_fg)


def test_dense_loss_skips_unannotated_samples():
    logits = torch.zeros(2, 3, 2, 2, dtype=torch.float64)
    parts = torch.zeros(2, 2, 2, dtype=torch.long)
    uv = torch.zeros(2, 2, 2, 2, dtype=torch.float64)
    assert dense_loss(logits, uv, parts, uv, valid=torch.tensor([False, False])).item() == 0.0


def test_joint_loss_default_weights():
    b = joint_loss(1.0, 1.0, 1.0, config=ModelConfig())
    assert b.total == pytest.approx(2.4, abs=1e-15)
    assert b.weights == (1.0, 0.8, 0.6)


def test_joint_loss_variant_s():
    b = joint_loss(0.7, 3.0, 4.0, config=ModelConfig(variant="S"))
    assert b.total == 0.7
    assert b.l_pose == 0.0 and b.l_dense == 0.0


def test_joint_loss_zero_weight():
    b = joint_loss(1.0, 5.0, 0.0, weights=(1.0, 0.0, 0.6))
    assert b.total == 1.0


def test_joint_loss_negative_weight():
    with pytest.raises(ValueError):
        joint_loss(1.0, 1.0, 1.0, weights=(1.0, -0.1, 0.6))


def test_joint_loss_total_law(rng):
    for _ in range(50):
        l = rng.uniform(0, 5, 3)
        w = rng.uniform(0, 2, 3)
        b = joint_loss(*l, weights=w)
        assert b.total == w[0] * l[0] + w[1] * l[1] + w[2] * l[2]


def test_log_line_round_trip():
    b = joint_loss(0.123456789, 0.5, 1 / 3, config=ModelConfig())
    it, back = parse_log_line(b.log_line(17))
    assert it == 17
    assert (back.l_seg, back.l_pose, back.l_dense, back.total) == (b.l_seg, b.l_pose, b.l_dense, b.total)


def test_seg_loss_lower_bound(rng):
    for _ in range(10):
        logits = torch.from_numpy(rng.normal(size=(1, 5, 3, 3)) * 3)
        target = torch.from_numpy(rng.integers(0, 5, (1, 3, 3)))
        assert seg_loss(logits, target).item() > 0


def test_seg_loss_gradient_spot_check(rng):
    logits = torch.from_numpy(rng.normal(size=(1, 4, 2, 3))).requires_grad_(True)
    target = torch.from_numpy(rng.integers(0, 4, (1, 2, 3)))
    seg_loss(logits, target).backward()
    numeric = central_difference(lambda t: seg_loss(t, target), logits)
    assert relative_error(logits.grad.numpy(), numeric) < 1e-4
