"""Optimisation loop, checkpointing, evaluation and the ablation protocol."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .core_types import VARIANTS, AnnotatedSample, ModelConfig
from .dataset import load_split
from .densepose_branch import predict_densepose
from .metrics import (
    DEFAULT_GPS_K,
    ConfusionAccumulator,
    MetricReport,
    _gps_terms,
    foreground_points,
    joint_distances,
    segmentation_report,
)
from .core_types import DensePoseMap, Skeleton
from .model import SPDModel, build_variant
from .objectives import LossBreakdown, dense_loss, joint_loss, pose_loss, seg_loss
from .pose_branch import to_pixels
from .seg_branch import predict_mask

log = logging.getLogger(__name__)

IMAGE_MEAN = 0.5
IMAGE_STD = 0.25


class NonFiniteLossError(RuntimeError):
    def __init__(self, iteration: int, component: str, value: float):
        super().__init__(f"non-finite {component} ({value}) at iteration {iteration}")
        self.iteration = iteration
        self.component = component


@dataclass
class TrainSettings:
    batch_size: int = 4
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eval_batch_size: int = 16


@dataclass
class TensorDataset:
    images: torch.Tensor  # (S, 3, H, W) normalised float
    masks: torch.Tensor  # (S, H, W) long
    joints: torch.Tensor  # (S, N, 2) pixels
    visible: torch.Tensor  # (S, N) bool
    parts: torch.Tensor  # (S, H, W) long
    uv: torch.Tensor  # (S, 2, H, W)
    dense_valid: torch.Tensor  # (S,) bool
    samples: list[AnnotatedSample] = field(repr=False, default_factory=list)

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_dims(self):
        return tuple(self.images.shape[-2:])

    def select(self, idx) -> "TensorDataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return TensorDataset(
            self.images[idx], self.masks[idx], self.joints[idx], self.visible[idx],
            self.parts[idx], self.uv[idx], self.dense_valid[idx],
            [self.samples[i] for i in idx.tolist()] if self.samples else [],
        )


def normalize_image(image: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float() / 255.0
    return (x - IMAGE_MEAN) / IMAGE_STD


def to_tensors(samples: Sequence[AnnotatedSample]) -> TensorDataset:
    if not samples:
        raise ValueError("dataset is empty")
    h, w = samples[0].shape
    parts, uvs, valid = [], [], []
    for s in samples:
        if s.densepose is None:
            parts.append(np.zeros((h, w), np.int64))
            uvs.append(np.zeros((2, h, w), np.float32))
            valid.append(False)
        else:
            parts.append(s.densepose.part_index)
            uvs.append(np.stack([s.densepose.u, s.densepose.v]).astype(np.float32))
            valid.append(True)
    return TensorDataset(
        images=torch.stack([normalize_image(s.image) for s in samples]),
        masks=torch.from_numpy(np.stack([s.mask.data for s in samples]).astype(np.int64)),
        joints=torch.from_numpy(np.stack([s.skeleton.joints for s in samples]).astype(np.float32)),
        visible=torch.from_numpy(np.stack([s.skeleton.visibility for s in samples]).astype(bool)),
        parts=torch.from_numpy(np.stack(parts).astype(np.int64)),
        uv=torch.from_numpy(np.stack(uvs)),
        dense_valid=torch.tensor(valid),
        samples=list(samples),
    )


DatasetLike = Union[str, os.PathLike, Sequence[AnnotatedSample], TensorDataset]


def as_dataset(data: DatasetLike) -> TensorDataset:
    if isinstance(data, TensorDataset):
        return data
    if isinstance(data, (str, os.PathLike)):
        return to_tensors(load_split(data))
    return to_tensors(list(data))


def batch_indices(num_samples: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Sample indices of a mini-batch.

    Batches walk through a fresh seeded permutation per epoch, so the order
    depends only on (seed, iteration) and resuming needs no sampler state.
    """
    pos = iteration * batch_size + np.arange(batch_size)
    epochs, offsets = np.divmod(pos, num_samples)
    out = np.empty(batch_size, dtype=np.int64)
    for e in np.unique(epochs):
        perm = np.random.default_rng([seed, int(e)]).permutation(num_samples)
        sel = epochs == e
        out[sel] = perm[offsets[sel]]
    return out


def compute_losses(model: SPDModel, out, batch: TensorDataset) -> LossBreakdown:
    config = model.config
    l_seg = seg_loss(out.seg.final_logits, batch.masks)
    l_pose = 0.0
    l_dense = 0.0
    if out.pose is not None:
        l_pose = pose_loss(out.pose.refined_coords, batch.joints, batch.visible, batch.image_dims).value
    if out.dense is not None:
        l_dense = dense_loss(
            out.dense.part_logits, out.dense.uv, batch.parts, batch.uv, batch.dense_valid,
            form=config.dense_loss_form, delta=config.huber_delta,
        )
    return joint_loss(l_seg, l_pose, l_dense, config=config)


@dataclass
class TrainState:
    model: SPDModel
    optimizer: torch.optim.Optimizer
    settings: TrainSettings
    iteration: int = 0
    loss_history: list[LossBreakdown] = field(default_factory=list)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    @property
    def parameters(self) -> dict:
        return self.model.state_dict()

    @property
    def optimizer_state(self) -> dict:
        return self.optimizer.state_dict()


def make_optimizer(model: SPDModel, settings: TrainSettings) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=settings.lr, betas=tuple(settings.betas))


def new_state(model: SPDModel, settings: Optional[TrainSettings] = None) -> TrainState:
    settings = settings or TrainSettings()
    return TrainState(model=model, optimizer=make_optimizer(model, settings), settings=settings)


def train(
    model: Union[SPDModel, TrainState],
    dataset: DatasetLike,
    iterations: int,
    settings: Optional[TrainSettings] = None,
    log_file=None,
) -> TrainState:
    """Run ``iterations`` optimisation steps and return the updated state.

    Passing a ``TrainState`` continues from its iteration counter; the batch
    order is a pure function of (seed, iteration), so a resumed run sees the
    same batches as an uninterrupted one.
    """
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    state = model if isinstance(model, TrainState) else new_state(model, settings)
    data = as_dataset(dataset)
    net, opt = state.model, state.optimizer
    seed = net.config.seed
    batch_size = min(state.settings.batch_size, len(data))
    log_handle = open(log_file, "a") if isinstance(log_file, (str, os.PathLike)) else log_file

    net.train()
    try:
        for _ in range(iterations):
            it = state.iteration
            batch = data.select(batch_indices(len(data), batch_size, seed, it))
            out = net(batch.images)
            losses = compute_losses(net, out, batch)
            record = losses.as_floats()
            for name in ("l_seg", "l_pose", "l_dense", "total"):
                value = getattr(record, name)
                if not math.isfinite(value):
                    raise NonFiniteLossError(it + 1, name, value)
            opt.zero_grad(set_to_none=True)
            losses.total.backward()
            opt.step()
            state.iteration = it + 1
            state.loss_history.append(record)
            if log_handle is not None:
                log_handle.write(record.log_line(state.iteration) + "\n")
            if state.iteration % 100 == 0:
                log.info(record.log_line(state.iteration))
    finally:
        if log_handle is not None and log_handle is not log_file:
            log_handle.close()
    return state


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": asdict(state.config),
        "settings": asdict(state.settings),
        "iteration": state.iteration,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "rng_state": torch.get_rng_state(),
        "loss_history": [asdict(b) for b in state.loss_history],
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = ModelConfig(**payload["config"])
    settings = TrainSettings(**payload["settings"])
    model = build_variant(config)
    model.load_state_dict(payload["model"])
    optimizer = make_optimizer(model, settings)
    optimizer.load_state_dict(payload["optimizer"])
    torch.set_rng_state(payload["rng_state"])
    history = [LossBreakdown(**{**b, "weights": tuple(b["weights"])}) for b in payload["loss_history"]]
    return TrainState(model, optimizer, settings, payload["iteration"], history)


@dataclass
class _EvalPartial:
    confusion: ConfusionAccumulator
    dist_sum: float = 0.0
    dist_count: int = 0
    gps_sum: float = 0.0
    gps_count: int = 0


def _evaluate_chunk(model: SPDModel, data: TensorDataset, batch_size: int, gps_k) -> _EvalPartial:
    part = _EvalPartial(ConfusionAccumulator(model.config.num_classes))
    h, w = data.image_dims
    for start in range(0, len(data), batch_size):
        batch = data.select(range(start, min(start + batch_size, len(data))))
        with torch.no_grad():
            out = model(batch.images)
        pred = predict_mask(out.seg.final_logits)
        part.confusion.accumulate(pred, batch.masks.numpy())
        for i in range(len(batch)):
            if out.pose is not None and bool(batch.visible[i].any()):
                target = Skeleton(batch.joints[i].double().numpy(), batch.visible[i].numpy())
                d = joint_distances(to_pixels(out.pose.refined_coords[i], h, w), target)
                part.dist_sum += float(d.sum())
                part.dist_count += int(d.size)
            if out.dense is not None and bool(batch.dense_valid[i]):
                target = DensePoseMap(batch.parts[i].numpy(), batch.uv[i, 0].numpy(), batch.uv[i, 1].numpy(), model.config.num_parts)
                points = foreground_points(target)
                if len(points):
                    terms = _gps_terms(predict_densepose(out.dense, i), target, points, gps_k, None)
                    part.gps_sum += float(terms.sum())
                    part.gps_count += int(terms.size)
    return part


def evaluate(model: SPDModel, dataset: DatasetLike, batch_size: int = 16, workers: Optional[int] = None, gps_k=DEFAULT_GPS_K) -> MetricReport:
    """Eval-mode pass over a split.

    mED pools every mutually visible joint of the split; GPS pools every
    annotated foreground pixel. Either is None when the model lacks the branch
    or the split lacks the annotation.
    """
    data = as_dataset(dataset)
    if workers is None:
        workers = int(os.environ.get("SPD_NUM_WORKERS", "1") or 1)
    workers = max(1, min(workers, len(data)))
    was_training = model.training
    model.eval()
    try:
        if workers == 1:
            parts = [_evaluate_chunk(model, data, batch_size, gps_k)]
        else:
            shards = np.array_split(np.arange(len(data)), workers)
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(lambda idx: _evaluate_chunk(model, data.select(idx), batch_size, gps_k), shards))
    finally:
        model.train(was_training)

    confusion = parts[0].confusion
    for p in parts[1:]:
        confusion = confusion.merge(p.confusion)
    report = segmentation_report(confusion)
    dist_count = sum(p.dist_count for p in parts)
    gps_count = sum(p.gps_count for p in parts)
    if dist_count:
        report.med_pixels = sum(p.dist_sum for p in parts) / dist_count
    if gps_count:
        report.gps = sum(p.gps_sum for p in parts) / gps_count
    return report


def evaluate_targets(dataset: DatasetLike, num_classes: int) -> MetricReport:
    """Score a split's annotations against themselves (pipeline self-check)."""
    data = as_dataset(dataset)
    acc = ConfusionAccumulator(num_classes)
    acc.accumulate(data.masks.numpy(), data.masks.numpy())
    report = segmentation_report(acc)
    if bool(data.visible.any()):
        report.med_pixels = 0.0
    if bool(data.dense_valid.any()):
        report.gps = 1.0
    return report


METRIC_COLUMNS = ("iou", "precision", "recall", "f1")


@dataclass
class AblationTable:
    seeds: list[int]
    cells: dict = field(default_factory=dict)  # (variant, seed) -> MetricReport | error string

    def value(self, variant: str, seed: int, column: str) -> Optional[float]:
        cell = self.cells.get((variant, seed))
        return getattr(cell, column) if isinstance(cell, MetricReport) else None

    def mean(self, variant: str, column: str) -> Optional[float]:
        vals = [self.value(variant, s, column) for s in self.seeds]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def rows(self) -> list[dict]:
        out = []
        for variant in VARIANTS:
            for seed in self.seeds:
                cell = self.cells.get((variant, seed))
                row = {"variant": variant, "seed": seed}
                if isinstance(cell, MetricReport):
                    row.update({c: getattr(cell, c) for c in METRIC_COLUMNS})
                else:
                    row["error"] = str(cell)
                out.append(row)
            out.append({"variant": variant, "seed": "mean", **{c: self.mean(variant, c) for c in METRIC_COLUMNS}})
        return out

    def to_csv(self) -> str:
        lines = ["variant,seed,iou,precision,recall,f1,error"]
        for r in self.rows():
            vals = ["" if r.get(c) is None else repr(float(r[c])) for c in METRIC_COLUMNS]
            lines.append(",".join([r["variant"], str(r["seed"]), *vals, r.get("error", "").replace(",", ";")]))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = [f"{'Model':<6} {'IoU':>7} {'Pr':>7} {'Rec':>7} {'F1':>7}   (mean over seeds {self.seeds})"]
        for variant in VARIANTS:
            vals = [self.mean(variant, c) for c in METRIC_COLUMNS]
            lines.append(f"{variant:<6} " + " ".join("      -" if v is None else f"{v:7.3f}" for v in vals))
        lines.append("")
        lines.append("per seed:")
        for variant in VARIANTS:
            for seed in self.seeds:
                cell = self.cells.get((variant, seed))
                if isinstance(cell, MetricReport):
                    lines.append(f"  {variant:<4} seed={seed:<4} " + " ".join(f"{getattr(cell, c):7.3f}" for c in METRIC_COLUMNS))
                else:
                    lines.append(f"  {variant:<4} seed={seed:<4} FAILED: {cell}")
        return "\n".join(lines) + "\n"


def run_ablation(
    base: ModelConfig,
    train_data: DatasetLike,
    eval_data: DatasetLike,
    seeds: Sequence[int],
    iterations: int,
    settings: Optional[TrainSettings] = None,
    variants: Sequence[str] = VARIANTS,
) -> AblationTable:
    """Train and evaluate every variant for every seed on identical data orders."""
    if not seeds:
        raise ValueError("need at least one seed")
    train_set, eval_set = as_dataset(train_data), as_dataset(eval_data)
    table = AblationTable(seeds=list(seeds))
    for seed in seeds:
        for variant in variants:
            config = replace(base, variant=variant, seed=seed)
            try:
                state = train(build_variant(config), train_set, iterations, settings)
                table.cells[(variant, seed)] = evaluate(state.model, eval_set)
            except Exception as exc:  # one failed cell must not sink the table
                log.exception("ablation cell %s/seed %s failed", variant, seed)
                table.cells[(variant, seed)] = f"{type(exc).__name__}: {exc}"
    return table
