"""Assembly of backbone and branches into the four ablation variants."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .backbone import BackboneFeatures, build_backbone
from .core_types import VARIANTS, ModelConfig
from .densepose_branch import DensePoseBranch, DensePoseOutput
from .pose_branch import PoseBranch, PoseBranchOutput
from .seg_branch import SegBranch, SegBranchOutput

BRANCH_PREFIXES = {"backbone": "backbone.", "seg": "seg.", "pose": "pose.", "dense": "dense."}


@dataclass
class ModelOutput:
    seg: SegBranchOutput
    pose: Optional[PoseBranchOutput] = None
    dense: Optional[DensePoseOutput] = None
    features: Optional[BackboneFeatures] = None


class SPDModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        # construction order is fixed so shared modules get identical initial
        # weights across variants built from the same seed
        self.backbone = build_backbone(config)
        c4, c5 = self.backbone.res4_channels, self.backbone.res5_channels
        self.seg = SegBranch(c5, config.num_classes, config.context_channels, config.aspp_channels, config.aspp_rates)
        self.pose = PoseBranch(c4, config.num_joints, config.context_channels) if config.has_pose else None
        self.dense = DensePoseBranch(c4, config.num_parts, config.context_channels) if config.has_dense else None

    @property
    def variant(self) -> str:
        return self.config.variant

    def forward(self, image: torch.Tensor) -> ModelOutput:
        out_size = image.shape[-2:]
        feats = self.backbone(image)
        initial_logits, seg_context = self.seg.seg_initial(feats.res5)
        pose_out = None
        pose_context = None
        if self.pose is not None:
            pose_out = self.pose(feats.res4, seg_context)
            pose_context = pose_out.pose_context
        final_logits = self.seg.seg_refine(seg_context, initial_logits, pose_context, out_size)
        dense_out = self.dense(feats.res4, out_size) if self.dense is not None else None
        return ModelOutput(
            seg=SegBranchOutput(initial_logits, seg_context, final_logits),
            pose=pose_out,
            dense=dense_out,
            features=feats,
        )

    def zero_init_heads(self):
        for branch in (self.seg, self.pose, self.dense):
            if branch is not None:
                branch.zero_init_heads()


def build_variant(config: ModelConfig) -> SPDModel:
    if config.variant not in VARIANTS:
        raise ValueError(f"unknown variant {config.variant!r}")
    torch.manual_seed(config.seed)
    return SPDModel(config)
