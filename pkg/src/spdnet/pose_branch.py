"""Keypoint head: 8-conv initial stage and a refinement stage fed by segmentation context."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import conv_bn_relu
from .core_types import Skeleton
from .seg_branch import resample_to


def coordinate_grid(h: int, w: int, like: torch.Tensor):
    """Normalised cell coordinates: column j maps to j / (w - 1), row i to i / (h - 1)."""
    xs = torch.linspace(0.0, 1.0, w, dtype=like.dtype, device=like.device) if w > 1 else like.new_full((1,), 0.5)
    ys = torch.linspace(0.0, 1.0, h, dtype=like.dtype, device=like.device) if h > 1 else like.new_full((1,), 0.5)
    return xs, ys


def soft_argmax(heatmaps: torch.Tensor) -> torch.Tensor:
    """Expected (x, y) of the per-channel spatial softmax.

    heatmaps: (B, N, h, w) logits -> (B, N, 2) coordinates in [0, 1].
    """
    b, n, h, w = heatmaps.shape
    prob = F.softmax(heatmaps.reshape(b, n, h * w), dim=-1).reshape(b, n, h, w)
    xs, ys = coordinate_grid(h, w, heatmaps)
    x = (prob.sum(dim=2) * xs).sum(dim=-1)
    y = (prob.sum(dim=3) * ys).sum(dim=-1)
    return torch.stack([x, y], dim=-1)


def render_gaussians(coords: torch.Tensor, h: int, w: int, sigma: float = 1.0) -> torch.Tensor:
    """Gaussian bumps of ``sigma`` cells centred on normalised coordinates: (B, N, 2) -> (B, N, h, w)."""
    xs, ys = coordinate_grid(h, w, coords)
    cx = coords[..., 0:1] * max(w - 1, 1)
    cy = coords[..., 1:2] * max(h - 1, 1)
    gx = torch.exp(-((xs * max(w - 1, 1) - cx) ** 2) / (2 * sigma**2))  # (B, N, w)
    gy = torch.exp(-((ys * max(h - 1, 1) - cy) ** 2) / (2 * sigma**2))  # (B, N, h)
    return gy.unsqueeze(-1) * gx.unsqueeze(-2)


@dataclass
class PoseBranchOutput:
    pose_context: torch.Tensor  # (B, C_ctx, h4, w4)
    joint_heatmaps: torch.Tensor  # (B, N, h4, w4), initial stage logits
    initial_coords: torch.Tensor  # (B, N, 2)
    refined_coords: torch.Tensor  # (B, N, 2)
    refined_heatmaps: Optional[torch.Tensor] = None


class PoseInitial(nn.Module):
    def __init__(self, cin: int, num_joints: int, context_channels: int):
        super().__init__()
        c = context_channels
        self.features = nn.Sequential(
            conv_bn_relu(cin, c, 3),
            *[conv_bn_relu(c, c, 3) for _ in range(5)],
        )
        self.head = nn.Sequential(conv_bn_relu(c, c, 3), nn.Conv2d(c, num_joints, 1))

    def forward(self, res4):
        context = self.features(res4)
        heatmaps = self.head(context)
        return context, heatmaps, soft_argmax(heatmaps)


class PoseRefine(nn.Module):
    def __init__(self, num_joints: int, context_channels: int, sigma: float = 1.0):
        super().__init__()
        c = context_channels
        self.context_channels = c
        self.sigma = sigma
        self.local = nn.Sequential(
            conv_bn_relu(2 * c + num_joints, c, 3),
            conv_bn_relu(c, c, 3),
            conv_bn_relu(c, c, 3),
            conv_bn_relu(c, c, 3),
        )
        self.head = nn.Sequential(conv_bn_relu(c, c, 3), nn.Conv2d(c, num_joints, 1))

    def forward(self, pose_context, initial_coords, seg_context=None):
        b, _, h, w = pose_context.shape
        if seg_context is None:
            seg_context = pose_context.new_zeros((b, self.context_channels, h, w))
        else:
            seg_context = resample_to(seg_context, (h, w))
        bumps = render_gaussians(initial_coords, h, w, self.sigma)
        x = torch.cat([pose_context, bumps, seg_context], dim=1)
        heatmaps = self.head(self.local(x))
        return soft_argmax(heatmaps), heatmaps


class PoseBranch(nn.Module):
    def __init__(self, cin: int, num_joints: int, context_channels: int):
        super().__init__()
        self.num_joints = num_joints
        self.initial = PoseInitial(cin, num_joints, context_channels)
        self.refine = PoseRefine(num_joints, context_channels)

    def pose_initial(self, res4):
        return self.initial(res4)

    def pose_refine(self, pose_context, initial_coords, seg_context=None):
        return self.refine(pose_context, initial_coords, seg_context)[0]

    def forward(self, res4, seg_context=None) -> PoseBranchOutput:
        context, heatmaps, coords = self.initial(res4)
        refined, refined_heatmaps = self.refine(context, coords, seg_context)
        return PoseBranchOutput(context, heatmaps, coords, refined, refined_heatmaps)

    def zero_init_heads(self):
        for head in (self.initial.head, self.refine.head):
            nn.init.zeros_(head[-1].weight)
            nn.init.zeros_(head[-1].bias)


def to_pixels(coords, height: int, width: int) -> Skeleton:
    """Map normalised (N, 2) coordinates to a pixel-space skeleton with every joint visible."""
    coords = np.asarray(coords.detach().cpu() if isinstance(coords, torch.Tensor) else coords, dtype=np.float64)
    joints = np.stack([coords[:, 0] * (width - 1), coords[:, 1] * (height - 1)], axis=1)
    return Skeleton(joints, np.ones(len(joints), dtype=bool))
