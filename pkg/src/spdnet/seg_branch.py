"""Two-stage segmentation head: ASPP initial estimate plus a context-fusing refinement."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import conv_bn_relu
from .core_types import SegMask


class ASPP(nn.Module):
    """Parallel 1x1 and dilated 3x3 convolutions, concatenated and projected."""

    def __init__(self, cin: int, cout: int, rates: Sequence[int] = (1, 2, 4)):
        super().__init__()
        rates = tuple(rates)
        if not rates:
            raise ValueError("ASPP needs at least one rate")
        if any(int(r) != r or r < 1 for r in rates):
            raise ValueError(f"ASPP rates must be integers >= 1, got {rates}")
        self.rates = rates
        self.branches = nn.ModuleList(
            [conv_bn_relu(cin, cout, 1)] + [conv_bn_relu(cin, cout, 3, dilation=r) for r in rates]
        )
        self.project = conv_bn_relu(cout * (len(rates) + 1), cout, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        if max(self.rates) > max(h, w):
            raise ValueError(f"ASPP rate {max(self.rates)} exceeds feature extent {h}x{w}")
        return self.project(torch.cat([b(x) for b in self.branches], dim=1))


def aspp(features: torch.Tensor, rates: Sequence[int], width: int = 32) -> torch.Tensor:
    """Apply a freshly initialised ASPP block; mainly for shape inspection."""
    return ASPP(features.shape[1], width, rates).to(features)(features)


@dataclass
class SegBranchOutput:
    initial_logits: torch.Tensor  # (B, K, h5, w5)
    seg_context: torch.Tensor  # (B, C_ctx, h5, w5)
    final_logits: torch.Tensor  # (B, K, H, W)


def resample_to(x: torch.Tensor, size) -> torch.Tensor:
    """Average-pool down or bilinearly up to ``size``."""
    size = tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    if x.shape[-2] >= size[0] and x.shape[-1] >= size[1]:
        return F.adaptive_avg_pool2d(x, size)
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class SegInitial(nn.Module):
    def __init__(self, cin: int, num_classes: int, context_channels: int, aspp_channels: int, rates):
        super().__init__()
        self.aspp = ASPP(cin, aspp_channels, rates)
        self.classifier = nn.Conv2d(aspp_channels, num_classes, 1)
        self.context = nn.Sequential(
            conv_bn_relu(cin, context_channels, 3),
            conv_bn_relu(context_channels, context_channels, 3),
        )

    def forward(self, res5):
        return self.classifier(self.aspp(res5)), self.context(res5)


class SegRefine(nn.Module):
    def __init__(self, num_classes: int, context_channels: int, aspp_channels: int, rates):
        super().__init__()
        self.context_channels = context_channels
        cin = 2 * context_channels + num_classes
        self.local = nn.Sequential(
            conv_bn_relu(cin, context_channels, 3),
            conv_bn_relu(context_channels, context_channels, 3),
            conv_bn_relu(context_channels, context_channels, 3),
            conv_bn_relu(context_channels, context_channels, 3),
        )
        # channel projection to the ASPP input width
        self.reshape = conv_bn_relu(context_channels, aspp_channels, 1)
        self.aspp = ASPP(aspp_channels, aspp_channels, rates)
        self.classifier = nn.Conv2d(aspp_channels, num_classes, 1)

    def fuse_inputs(self, seg_context, initial_logits, pose_context=None):
        size = seg_context.shape[-2:]
        if pose_context is None:
            pose_context = seg_context.new_zeros(
                (seg_context.shape[0], self.context_channels, *size)
            )
        else:
            pose_context = resample_to(pose_context, size)
        initial_logits = resample_to(initial_logits, size)
        if not (pose_context.shape[-2:] == initial_logits.shape[-2:] == size):
            raise ValueError("refinement inputs disagree in resolution")
        return torch.cat([seg_context, initial_logits, pose_context], dim=1)

    def forward(self, seg_context, initial_logits, pose_context=None, out_size=None):
        x = self.fuse_inputs(seg_context, initial_logits, pose_context)
        logits = self.classifier(self.aspp(self.reshape(self.local(x))))
        if out_size is not None:
            logits = F.interpolate(logits, size=tuple(out_size), mode="bilinear", align_corners=False)
        return logits


class SegBranch(nn.Module):
    def __init__(self, cin: int, num_classes: int, context_channels: int, aspp_channels: int, rates=(1, 2, 4)):
        super().__init__()
        self.num_classes = num_classes
        self.initial = SegInitial(cin, num_classes, context_channels, aspp_channels, rates)
        self.refine = SegRefine(num_classes, context_channels, aspp_channels, rates)

    def seg_initial(self, res5):
        return self.initial(res5)

    def seg_refine(self, seg_context, initial_logits, pose_context=None, out_size=None):
        return self.refine(seg_context, initial_logits, pose_context, out_size)

    def zero_init_heads(self):
        for conv in (self.initial.classifier, self.refine.classifier):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)


def predict_mask(final_logits: torch.Tensor) -> np.ndarray:
    """Per-pixel argmax over classes; ties go to the lowest index.

    Accepts (K, H, W) or (B, K, H, W) logits and returns int64 labels.
    """
    # torch.argmax does not document its tie rule; numpy returns the first maximum
    arr = final_logits.detach().cpu().numpy()
    return np.argmax(arr, axis=-3).astype(np.int64)


def predict_segmask(final_logits: torch.Tensor, num_classes: Optional[int] = None) -> SegMask:
    if final_logits.dim() != 3:
        raise ValueError("expected a single (K, H, W) logit map")
    return SegMask(predict_mask(final_logits), num_classes or final_logits.shape[0])
