import dataclasses
import math

import numpy as np
import pytest
import torch

from spdnet import trainer
from spdnet.core_types import VARIANTS, ModelConfig
from spdnet.model import build_variant
from spdnet.objectives import dense_loss, parse_log_line, pose_loss, seg_loss
from spdnet.trainer import (
    NonFiniteLossError,
    TrainSettings,
    as_dataset,
    batch_indices,
    evaluate,
    evaluate_targets,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
)

from oracles import brute_force_scores

TINY = ModelConfig(
    backbone_blocks=((1, 8), (1, 8), (1, 8), (1, 12), (1, 12)),
    stage_strides=(2, 1, 2, 1, 1),
    context_channels=8,
    aspp_channels=8,
)
SETTINGS = TrainSettings(batch_size=2)


@pytest.fixture(scope="module")
def data():
    from spdnet.synthdata import generate_sample

    return as_dataset([generate_sample(5, i) for i in range(4)])


def names(model):
    return {n for n, _ in model.named_parameters()}


def test_variant_parameter_sets():
    sets = {v: names(build_variant(TINY.with_variant(v))) for v in VARIANTS}
    assert sets["S"] < sets["SD"] < sets["SPD"]
    assert sets["S"] < sets["SP"] < sets["SPD"]
    assert not any(n.startswith(("pose.", "dense.")) for n in sets["S"])
    assert sets["SP"] | sets["SD"] == sets["SPD"]


def test_shared_modules_start_identical():
    full = build_variant(TINY).state_dict()
    for v in ("SP", "SD", "S"):
        for k, t in build_variant(TINY.with_variant(v)).state_dict().items():
            if k.startswith(("backbone.", "seg.initial.")):
                assert torch.equal(t, full[k]), k


def task_losses(model, batch):
    out = model(batch.images)
    ls = seg_loss(out.seg.final_logits, batch.masks)
    lp = pose_loss(out.pose.refined_coords, batch.joints.double(), batch.visible, batch.image_dims).value
    ld = dense_loss(out.dense.part_logits, out.dense.uv, batch.parts, batch.uv.double(), batch.dense_valid)
    return ls, lp, ld


def grads(model, loss):
    model.zero_grad()
    loss.backward()
    return {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in model.named_parameters()}


def test_joint_gradient_is_weighted_sum(data):
    model = build_variant(TINY).double().eval()
    batch = data.select([0, 1])
    batch = dataclasses.replace(batch, images=batch.images.double())
    lam = TINY.effective_weights()
    parts = [grads(model, task_losses(model, batch)[i]) for i in range(3)]
    ls, lp, ld = task_losses(model, batch)
    total = grads(model, lam[0] * ls + lam[1] * lp + lam[2] * ld)
    for n in total:
        expected = lam[0] * parts[0][n] + lam[1] * parts[1][n] + lam[2] * parts[2][n]
        assert torch.allclose(total[n], expected, rtol=1e-9, atol=1e-12), n


def test_every_task_reaches_the_backbone(data):
    model = build_variant(TINY).double().eval()
    batch = data.select([0, 1])
    batch = dataclasses.replace(batch, images=batch.images.double())
    for i in range(3):
        g = grads(model, task_losses(model, batch)[i])
        assert g["backbone.stages.1.0.conv1.weight"].abs().sum() > 0


def test_batch_order_is_seeded_permutation():
    seen = np.concatenate([batch_indices(10, 5, 3, it) for it in range(2)])
    assert sorted(seen.tolist()) == list(range(10))
    assert np.array_equal(batch_indices(10, 5, 3, 7), batch_indices(10, 5, 3, 7))
    assert not np.array_equal(
        np.concatenate([batch_indices(10, 5, 3, it) for it in range(2)]),
        np.concatenate([batch_indices(10, 5, 4, it) for it in range(2)]),
    )
    # a batch straddling an epoch boundary takes the tail of one permutation and the head of the next
    straddle = batch_indices(10, 4, 0, 2)
    assert straddle[:2].tolist() == np.random.default_rng([0, 0]).permutation(10)[8:].tolist()
    assert straddle[2:].tolist() == np.random.default_rng([0, 1]).permutation(10)[:2].tolist()


def test_single_iteration_history(data, tmp_path):
    state = train(build_variant(TINY.with_variant("SD")), data, 1, SETTINGS, log_file=tmp_path / "log.txt")
    assert state.iteration == 1 and len(state.loss_history) == 1
    lines = (tmp_path / "log.txt").read_text().splitlines()
    it, rec = parse_log_line(lines[0])
    assert it == 1 and rec.l_pose == 0.0 and rec.l_dense > 0


@pytest.mark.parametrize("variant,zero", [("SP", ("l_dense",)), ("SD", ("l_pose",)), ("S", ("l_pose", "l_dense"))])
def test_ablated_losses_exactly_zero(data, variant, zero):
    state = train(build_variant(TINY.with_variant(variant)), data, 3, SETTINGS)
    for rec in state.loss_history:
        for name in zero:
            assert getattr(rec, name) == 0.0
        expected = sum(w * getattr(rec, n) for w, n in zip(rec.weights, ("l_seg", "l_pose", "l_dense")))
        assert rec.total == pytest.approx(expected, rel=1e-6)  # total is accumulated in float32


def test_same_seed_same_run(data, tmp_path):
    a = train(build_variant(TINY), data, 3, SETTINGS, log_file=tmp_path / "a.txt")
    b = train(build_variant(TINY), data, 3, SETTINGS, log_file=tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    for (k, x), y in zip(a.model.state_dict().items(), b.model.state_dict().values()):
        assert torch.equal(x, y), k
    assert evaluate(a.model, data).to_json() == evaluate(b.model, data).to_json()


def test_checkpoint_resume_equivalence(data, tmp_path):
    straight = train(build_variant(TINY), data, 4, SETTINGS)
    first = train(build_variant(TINY), data, 2, SETTINGS)
    save_checkpoint(first, tmp_path / "ckpt.pt")
    resumed = train(load_checkpoint(tmp_path / "ckpt.pt"), data, 2)
    assert resumed.iteration == 4
    assert [r.log_line(i) for i, r in enumerate(resumed.loss_history)] == [
        r.log_line(i) for i, r in enumerate(straight.loss_history)
    ]
    for k, x in straight.model.state_dict().items():
        y = resumed.model.state_dict()[k]
        assert torch.allclose(x.double(), y.double(), atol=1e-6, rtol=0), k


def test_missing_checkpoint():
    with pytest.raises(FileNotFoundError):
        load_checkpoint("/nonexistent/ckpt.pt")


def test_non_finite_loss_aborts(data):
    model = build_variant(TINY)
    with torch.no_grad():
        model.seg.refine.classifier.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as err:
        train(model, data, 5, SETTINGS)
    assert err.value.iteration == 1


def test_zero_iterations_rejected(data):
    with pytest.raises(ValueError):
        train(build_variant(TINY), data, 0)


def test_untrained_model_matches_constant_baseline(data):
    model = build_variant(TINY)
    model.zero_init_heads()
    report = evaluate(model, data)
    target = data.masks.numpy()
    expected = brute_force_scores(np.zeros_like(target), target, TINY.num_classes)
    assert report.iou == pytest.approx(expected[0], abs=1e-12)
    assert report.iou < 0.1


def test_s_variant_omits_pose_and_surface_metrics(data):
    report = evaluate(build_variant(TINY.with_variant("S")), data)
    assert report.med_pixels is None and report.gps is None
    d = report.to_dict()
    assert "med_pixels" not in d and "gps" not in d


def test_missing_densepose_reports_absent(data):
    stripped = [dataclasses.replace(s, densepose=None) for s in data.samples]
    report = evaluate(build_variant(TINY), stripped)
    assert report.gps is None and report.med_pixels is not None


def test_sharded_evaluation_matches_serial(data):
    model = build_variant(TINY)
    serial = evaluate(model, data, batch_size=1, workers=1)
    sharded = evaluate(model, data, batch_size=1, workers=3)
    assert [c.support for c in serial.per_class] == [c.support for c in sharded.per_class]
    assert (serial.iou, serial.f1) == (sharded.iou, sharded.f1)
    # pooled sums are added in a different order
    assert sharded.med_pixels == pytest.approx(serial.med_pixels, abs=1e-12)
    assert sharded.gps == pytest.approx(serial.gps, abs=1e-12)


def test_evaluate_targets_self_check(data):
    report = evaluate_targets(data, TINY.num_classes)
    assert report.iou == 1.0 and report.med_pixels == 0.0 and report.gps == 1.0


def test_ablation_table_shape_and_error_capture(data, monkeypatch):
    real_train = trainer.train

    def flaky(model, *args, **kwargs):
        if model.config.variant == "SD":
            raise RuntimeError("boom")
        return real_train(model, *args, **kwargs)

    monkeypatch.setattr(trainer, "train", flaky)
    table = run_ablation(TINY, data, data, seeds=[1], iterations=1, settings=SETTINGS)
    assert table.mean("SD", "iou") is None
    assert "boom" in table.cells[("SD", 1)]
    for v in ("SPD", "SP", "S"):
        assert all(table.mean(v, c) is not None for c in ("iou", "precision", "recall", "f1"))
    text = table.to_text().splitlines()
    assert [line.split()[0] for line in text[1:5]] == list(VARIANTS)
    csv = table.to_csv().splitlines()
    assert csv[0] == "variant,seed,iou,precision,recall,f1,error"
    assert len(csv) == 1 + 4 * 2


def test_ablation_rerun_identical(data):
    a = run_ablation(TINY, data, data, seeds=[2], iterations=1, settings=SETTINGS, variants=("SPD", "S"))
    b = run_ablation(TINY, data, data, seeds=[2], iterations=1, settings=SETTINGS, variants=("SPD", "S"))
    assert a.to_csv() == b.to_csv()


def test_ablation_needs_a_seed(data):
    with pytest.raises(ValueError):
        run_ablation(TINY, data, data, seeds=[], iterations=1)
