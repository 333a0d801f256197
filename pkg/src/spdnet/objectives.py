"""Task losses and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from .core_types import ModelConfig

Scalar = Union[float, torch.Tensor]


def seg_loss(final_logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of the negative log softmax probability of the target class.

    final_logits: (B, K, H, W); target: (B, H, W) integer classes.
    """
    if final_logits.shape[-2:] != target.shape[-2:]:
        raise ValueError("logits and target differ in spatial size")
    k = final_logits.shape[1]
    if target.numel() and (int(target.max()) >= k or int(target.min()) < 0):
        raise ValueError(f"target class index outside [0, {k})")
    return F.cross_entropy(final_logits, target.long())


class PoseLoss(NamedTuple):
    value: torch.Tensor
    supervised: bool  # False when no joint was visible


def normalize_joints(joints: torch.Tensor, image_dims) -> torch.Tensor:
    """Pixel (x, y) -> [0, 1] using the same convention as ``to_pixels``."""
    h, w = image_dims
    scale = joints.new_tensor([max(w - 1, 1), max(h - 1, 1)])
    return joints / scale


def pose_loss(pred_coords: torch.Tensor, target_joints: torch.Tensor, visible: torch.Tensor, image_dims) -> PoseLoss:
    """1/(2N) * sum of squared coordinate errors over visible joints, in normalised units.

    pred_coords: (B, N, 2) in [0, 1]; target_joints: (B, N, 2) in pixels;
    visible: (B, N) bool. N is the number of visible joints in the batch.
    """
    if pred_coords.shape != target_joints.shape:
        raise ValueError("prediction and target joint arrays differ in shape")
    target = normalize_joints(target_joints.to(pred_coords.dtype), image_dims)
    vis = visible.bool()
    count = int(vis.sum())
    if count == 0:
        return PoseLoss(pred_coords.sum() * 0.0, False)
    sq = ((pred_coords - target) ** 2).sum(dim=-1)
    return PoseLoss(sq[vis].sum() / (2.0 * count), True)


def huber(residual: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    a = residual.abs()
    return torch.where(a <= delta, 0.5 * residual**2, delta * (a - 0.5 * delta))


def dense_loss(
    part_logits: torch.Tensor,
    uv: torch.Tensor,
    target_parts: torch.Tensor,
    target_uv: torch.Tensor,
    valid: Optional[torch.Tensor] = None,
    form: str = "product",
    delta: float = 1.0,
) -> torch.Tensor:
    """Dense-pose loss.

    On annotated foreground pixels the per-pixel part cross entropy multiplies
    (``form="product"``) or is added to (``form="sum"``) the Huber loss of the
    UV residuals, summed over both channels; that term is averaged over
    foreground pixels. Background pixels add their mean cross entropy.
    ``valid`` (B,) excludes samples without dense-pose annotations.
    """
    if form not in ("product", "sum"):
        raise ValueError("form must be 'product' or 'sum'")
    if part_logits.shape[-2:] != target_parts.shape[-2:] or uv.shape != target_uv.shape:
        raise ValueError("dense-pose prediction and target differ in shape")
    cse = F.cross_entropy(part_logits, target_parts.long(), reduction="none")  # (B, H, W)
    hub = huber(uv - target_uv.to(uv.dtype), delta).sum(dim=1)  # (B, H, W)
    per_pixel = cse * hub if form == "product" else cse + hub

    fg = target_parts > 0
    if valid is not None:
        keep = valid.bool().view(-1, 1, 1).expand_as(fg)
    else:
        keep = torch.ones_like(fg)
    fg_sel = fg & keep
    bg_sel = (~fg) & keep

    total = part_logits.sum() * 0.0
    if fg_sel.any():
        total = total + per_pixel[fg_sel].mean()
    if bg_sel.any():
        total = total + cse[bg_sel].mean()
    return total


@dataclass
class LossBreakdown:
    l_seg: Scalar
    l_pose: Scalar
    l_dense: Scalar
    total: Scalar
    weights: tuple[float, float, float]

    def as_floats(self) -> "LossBreakdown":
        f = lambda x: float(x.detach()) if isinstance(x, torch.Tensor) else float(x)  # noqa: E731
        return LossBreakdown(f(self.l_seg), f(self.l_pose), f(self.l_dense), f(self.total), self.weights)

    def log_line(self, iteration: int) -> str:
        b = self.as_floats()
        return (
            f"iteration={iteration} l_seg={b.l_seg!r} l_pose={b.l_pose!r} "
            f"l_dense={b.l_dense!r} total={b.total!r}"
        )


def parse_log_line(line: str) -> tuple[int, LossBreakdown]:
    fields = dict(item.split("=", 1) for item in line.split())
    b = LossBreakdown(
        float(fields["l_seg"]), float(fields["l_pose"]), float(fields["l_dense"]), float(fields["total"]), (0.0, 0.0, 0.0)
    )
    return int(fields["iteration"]), b


def joint_loss(
    l_seg: Scalar,
    l_pose: Scalar = 0.0,
    l_dense: Scalar = 0.0,
    config: Optional[ModelConfig] = None,
    weights: Optional[Sequence[float]] = None,
) -> LossBreakdown:
    """Weighted sum of task losses.

    Weights come from ``weights`` or, failing that, from ``config`` with ablated
    tasks zeroed. Zero-weighted tasks contribute exactly 0 to the total.
    """
    if weights is None:
        weights = (config or ModelConfig()).effective_weights()
    ws, wp, wd = (float(w) for w in weights)
    if min(ws, wp, wd) < 0:
        raise ValueError("loss weights must be non-negative")
    if config is not None:
        if not config.has_pose:
            l_pose, wp = 0.0, 0.0
        if not config.has_dense:
            l_dense, wd = 0.0, 0.0
    total = ws * l_seg
    if wp != 0.0:
        total = total + wp * l_pose
    if wd != 0.0:
        total = total + wd * l_dense
    return LossBreakdown(l_seg, l_pose, l_dense, total, (ws, wp, wd))
