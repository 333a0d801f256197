"""Segmentation, keypoint and dense-pose evaluation measures."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core_types import DensePoseMap, SegMask, Skeleton

# GPS normalisation used when no per-part value is given.
DEFAULT_GPS_K = 0.255


class ConfusionAccumulator:
    """K x K pixel counts; rows are target classes, columns predicted classes."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def accumulate(self, pred, target) -> "ConfusionAccumulator":
        p = pred.data if isinstance(pred, SegMask) else np.asarray(pred)
        t = target.data if isinstance(target, SegMask) else np.asarray(target)
        if p.shape != t.shape:
            raise ValueError(f"prediction {p.shape} and target {t.shape} differ in size")
        for m in (pred, target):
            if isinstance(m, SegMask) and m.num_classes != self.num_classes:
                raise ValueError("mask class count differs from accumulator")
        k = self.num_classes
        p = p.astype(np.int64).ravel()
        t = t.astype(np.int64).ravel()
        if p.size and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= k):
            raise ValueError(f"class index outside [0, {k})")
        self.matrix += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge accumulators with different class counts")
        out = ConfusionAccumulator(self.num_classes)
        out.matrix = self.matrix + other.matrix
        return out

    def _check(self):
        if self.total == 0:
            raise ValueError("no pixels accumulated")


def accumulate(acc: ConfusionAccumulator, pred, target) -> ConfusionAccumulator:
    return acc.accumulate(pred, target)


def per_class_iou(acc: ConfusionAccumulator) -> np.ndarray:
    """IoU per class, NaN where the class appears in neither prediction nor target."""
    m = acc.matrix.astype(np.float64)
    diag = np.diag(m)
    union = m.sum(axis=0) + m.sum(axis=1) - diag
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, diag / union, np.nan)


def miou(acc: ConfusionAccumulator, weighted: bool = False) -> float:
    """Mean IoU over classes with a nonzero union.

    ``weighted=True`` weights each class by its target pixel count instead.
    """
    acc._check()
    iou = per_class_iou(acc)
    present = ~np.isnan(iou)
    if weighted:
        support = acc.matrix.sum(axis=1).astype(np.float64)
        sel = present & (support > 0)
        return float((iou[sel] * support[sel]).sum() / support[sel].sum())
    return float(iou[present].mean())


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def per_class_precision_recall(acc: ConfusionAccumulator):
    m = acc.matrix.astype(np.float64)
    diag = np.diag(m)
    col, row = m.sum(axis=0), m.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(col > 0, diag / col, np.nan)
        recall = np.where(row > 0, diag / row, np.nan)
    return precision, recall


def precision_recall_f1(acc: ConfusionAccumulator) -> tuple[float, float, float]:
    """Macro precision and recall, each over classes with a nonzero denominator, and their F1."""
    acc._check()
    precision, recall = per_class_precision_recall(acc)
    p = float(np.nanmean(precision))
    r = float(np.nanmean(recall))
    return p, r, f1_score(p, r)


def _mutual_visibility(pred: Skeleton, target: Skeleton) -> np.ndarray:
    if pred.joints.shape != target.joints.shape:
        raise ValueError("skeletons have different joint counts")
    return np.asarray(pred.visibility, bool) & np.asarray(target.visibility, bool)


def joint_distances(pred: Skeleton, target: Skeleton) -> np.ndarray:
    """Pixel distances of mutually visible joints."""
    vis = _mutual_visibility(pred, target)
    d = np.asarray(pred.joints, np.float64) - np.asarray(target.joints, np.float64)
    return np.hypot(d[vis, 0], d[vis, 1])


def mean_euclidean_distance(pred: Skeleton, target: Skeleton, normalize: bool = True) -> float:
    """Mean pixel distance over mutually visible joints; ``normalize=False`` returns the plain sum."""
    dist = joint_distances(pred, target)
    if dist.size == 0:
        raise ValueError("no mutually visible joints")
    return float(dist.mean() if normalize else dist.sum())


def _gps_terms(pred: DensePoseMap, target: DensePoseMap, points, k, chart_scale) -> np.ndarray:
    points = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    if len(points) == 0:
        raise ValueError("GPS needs at least one annotated point")
    num_parts = target.num_parts
    k = np.broadcast_to(np.asarray(k, dtype=np.float64), (num_parts + 1,)) if np.ndim(k) == 0 else np.asarray(k, np.float64)
    if np.any(k[1:] <= 0):
        raise ValueError("GPS normalisation factors must be positive")
    scale = np.ones(num_parts + 1) if chart_scale is None else np.asarray(chart_scale, np.float64)
    ys, xs = points[:, 0], points[:, 1]
    tp = target.part_index[ys, xs]
    pp = pred.part_index[ys, xs]
    du = pred.u[ys, xs].astype(np.float64) - target.u[ys, xs]
    dv = pred.v[ys, xs].astype(np.float64) - target.v[ys, xs]
    d = np.hypot(du, dv) * scale[tp]
    sim = np.exp(-(d**2) / (2.0 * k[tp] ** 2))
    return np.where(pp == tp, sim, 0.0)


def geodesic_point_similarity(
    pred: DensePoseMap,
    target: DensePoseMap,
    annotated_points: Sequence,
    k=DEFAULT_GPS_K,
    chart_scale: Optional[Sequence[float]] = None,
) -> float:
    """Mean Gaussian similarity of predicted vs annotated surface points.

    ``annotated_points`` holds (row, col) pixels. The distance between two
    points on the same part is their UV-chart distance multiplied by the part's
    ``chart_scale`` (1 by default); points whose predicted part differs
    score 0. ``k`` is a scalar or one value per part index (0..P).
    This is a chart-space stand-in for surface geodesics, so values are only
    comparable within this package.
    """
    return float(_gps_terms(pred, target, annotated_points, k, chart_scale).mean())


def foreground_points(target: DensePoseMap, stride: int = 1) -> np.ndarray:
    """(row, col) of annotated foreground pixels, optionally on a sparse grid."""
    fg = target.part_index > 0
    if stride > 1:
        grid = np.zeros_like(fg)
        grid[::stride, ::stride] = True
        fg &= grid
    return np.argwhere(fg)


@dataclass
class ClassMetrics:
    cls: int
    iou: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    support: int


@dataclass
class MetricReport:
    iou: float
    precision: float
    recall: float
    f1: float
    per_class: list[ClassMetrics] = field(default_factory=list)
    med_pixels: Optional[float] = None
    gps: Optional[float] = None

    def to_dict(self) -> dict:
        d = {"iou": self.iou, "precision": self.precision, "recall": self.recall, "f1": self.f1}
        if self.med_pixels is not None:
            d["med_pixels"] = self.med_pixels
        if self.gps is not None:
            d["gps"] = self.gps
        d["per_class"] = [asdict(c) for c in self.per_class]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_text(self, class_names: Optional[Sequence[str]] = None) -> str:
        lines = [
            f"IoU  {self.iou:.4f}",
            f"Pr   {self.precision:.4f}",
            f"Rec  {self.recall:.4f}",
            f"F1   {self.f1:.4f}",
        ]
        if self.med_pixels is not None:
            lines.append(f"mED  {self.med_pixels:.3f} px")
        if self.gps is not None:
            lines.append(f"GPS  {self.gps:.4f} (chart-space proxy)")
        lines.append("")
        lines.append(f"{'class':<18} {'IoU':>7} {'Pr':>7} {'Rec':>7} {'F1':>7} {'support':>8}")
        fmt = lambda x: "     -" if x is None else f"{x:7.4f}"  # noqa: E731
        for c in self.per_class:
            name = class_names[c.cls] if class_names else str(c.cls)
            lines.append(f"{name:<18} {fmt(c.iou)} {fmt(c.precision)} {fmt(c.recall)} {fmt(c.f1)} {c.support:>8d}")
        return "\n".join(lines) + "\n"


def segmentation_report(acc: ConfusionAccumulator) -> MetricReport:
    iou = per_class_iou(acc)
    precision, recall = per_class_precision_recall(acc)
    support = acc.matrix.sum(axis=1)
    per_class = []
    opt = lambda x: None if math.isnan(x) else float(x)  # noqa: E731
    for c in range(acc.num_classes):
        p, r = opt(precision[c]), opt(recall[c])
        f1 = f1_score(p, r) if p is not None and r is not None else None
        per_class.append(ClassMetrics(c, opt(iou[c]), p, r, f1, int(support[c])))
    p, r, f1 = precision_recall_f1(acc)
    return MetricReport(iou=miou(acc), precision=p, recall=r, f1=f1, per_class=per_class)
