"""Shared data model: annotation rasters, skeletons, samples and model configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

NUM_CLASSES = 19
NUM_JOINTS = 16
NUM_PARTS = 24

VARIANTS = ("SPD", "SP", "SD", "S")

# Segmentation classes; background is index 0.
CLASS_NAMES = (
    "background",
    "hat",
    "hair",
    "face",
    "neck",
    "upper_clothes",
    "pants",
    "right_upper_arm",
    "left_upper_arm",
    "right_forearm",
    "left_forearm",
    "right_hand",
    "left_hand",
    "right_thigh",
    "left_thigh",
    "right_shin",
    "left_shin",
    "right_shoe",
    "left_shoe",
)

# Joint order shared by the generator, the skeleton files and the pose head.
JOINT_NAMES = (
    "r_ankle",
    "r_knee",
    "r_hip",
    "l_hip",
    "l_knee",
    "l_ankle",
    "pelvis",
    "thorax",
    "upper_neck",
    "head_top",
    "r_wrist",
    "r_elbow",
    "r_shoulder",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
)

# Dense-pose surface parts; index 0 is background.
PART_NAMES = (
    "background",
    "torso_back",
    "torso_front",
    "right_hand",
    "left_hand",
    "left_foot",
    "right_foot",
    "right_thigh_back",
    "left_thigh_back",
    "right_thigh_front",
    "left_thigh_front",
    "right_shin_back",
    "left_shin_back",
    "right_shin_front",
    "left_shin_front",
    "left_upper_arm_front",
    "right_upper_arm_front",
    "left_upper_arm_back",
    "right_upper_arm_back",
    "left_forearm_front",
    "right_forearm_front",
    "left_forearm_back",
    "right_forearm_back",
    "head_right",
    "head_left",
)


@dataclass(frozen=True)
class SegMask:
    data: np.ndarray  # (H, W) integer class indices
    num_classes: int = NUM_CLASSES

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Skeleton:
    joints: np.ndarray  # (N, 2) float, (x, y) in pixels
    visibility: np.ndarray  # (N,) bool

    @property
    def num_joints(self) -> int:
        return len(self.joints)


@dataclass(frozen=True)
class DensePoseMap:
    part_index: np.ndarray  # (H, W) integer in [0, P]
    u: np.ndarray  # (H, W) float in [0, 1]
    v: np.ndarray  # (H, W) float in [0, 1]
    num_parts: int = NUM_PARTS

    @property
    def shape(self) -> tuple[int, int]:
        return self.part_index.shape


@dataclass(frozen=True)
class AnnotatedSample:
    image: np.ndarray  # (H, W, 3) uint8
    mask: SegMask
    skeleton: Skeleton
    densepose: Optional[DensePoseMap] = None
    sample_id: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture, loss weighting and ablation variant of a model.

    ``backbone_blocks`` holds one ``(block_count, channel_width)`` pair per
    residual stage and ``stage_strides`` the downsampling factor applied at
    the start of each stage. Stages whose nominal downsampling has been
    traded for resolution use ``stage_dilations`` instead.
    """

    num_classes: int = NUM_CLASSES
    num_joints: int = NUM_JOINTS
    num_parts: int = NUM_PARTS
    backbone_blocks: tuple[tuple[int, int], ...] = ((1, 16), (1, 24), (1, 32), (1, 48), (1, 64))
    stage_strides: tuple[int, ...] = (2, 1, 1, 1, 1)
    stage_dilations: tuple[int, ...] = (1, 1, 1, 1, 2)
    context_channels: int = 32
    aspp_rates: tuple[int, ...] = (1, 2, 4)
    aspp_channels: int = 32
    lambda_s: float = 1.0
    lambda_p: float = 0.8
    lambda_d: float = 0.6
    variant: str = "SPD"
    dense_loss_form: str = "product"
    huber_delta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("lambda_s", "lambda_p", "lambda_d"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.dense_loss_form not in ("product", "sum"):
            raise ValueError("dense_loss_form must be 'product' or 'sum'")
        if min(self.num_classes, self.num_joints, self.num_parts, self.context_channels) < 1:
            raise ValueError("class, joint, part and context counts must be positive")
        # normalise list inputs coming from config files
        object.__setattr__(self, "backbone_blocks", tuple(tuple(b) for b in self.backbone_blocks))
        object.__setattr__(self, "stage_strides", tuple(self.stage_strides))
        object.__setattr__(self, "stage_dilations", tuple(self.stage_dilations))
        object.__setattr__(self, "aspp_rates", tuple(self.aspp_rates))

    @property
    def has_pose(self) -> bool:
        return self.variant in ("SPD", "SP")

    @property
    def has_dense(self) -> bool:
        return self.variant in ("SPD", "SD")

    def effective_weights(self) -> tuple[float, float, float]:
        """Loss weights with ablated tasks forced to zero."""
        return (
            self.lambda_s,
            self.lambda_p if self.has_pose else 0.0,
            self.lambda_d if self.has_dense else 0.0,
        )

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, variant=variant)


def default_config() -> ModelConfig:
    return ModelConfig()


# Strides of the full-size layout: stem to 1/4, then halving at stages 3 and 5.
RESNET_STAGE_STRIDES = (4, 1, 2, 1, 2)


def validate_sample(sample: AnnotatedSample) -> list[str]:
    """Return a description of every data-model invariant the sample breaks."""
    problems = []
    height, width = sample.shape
    if sample.image.ndim != 3 or sample.image.shape[2] != 3:
        problems.append("image must have 3 channels")

    mask = sample.mask
    if mask.data.shape != (height, width):
        problems.append("mask size differs from image")
    if mask.data.size and (mask.data.min() < 0 or mask.data.max() >= mask.num_classes):
        problems.append("class index out of range")

    skel = sample.skeleton
    if skel.joints.shape != (NUM_JOINTS, 2) or skel.visibility.shape != (NUM_JOINTS,):
        problems.append(f"skeleton must have exactly {NUM_JOINTS} joints")
    else:
        vis = skel.visibility.astype(bool)
        xs, ys = skel.joints[vis, 0], skel.joints[vis, 1]
        if not np.all(np.isfinite(skel.joints[vis])):
            problems.append("visible joint has non-finite coordinates")
        elif np.any((xs < 0) | (xs > width - 1) | (ys < 0) | (ys > height - 1)):
            problems.append("visible joint outside image bounds")

    dp = sample.densepose
    if dp is not None:
        if not (dp.part_index.shape == dp.u.shape == dp.v.shape == (height, width)):
            problems.append("dense-pose size differs from image")
        else:
            if dp.part_index.min() < 0 or dp.part_index.max() > dp.num_parts:
                problems.append("part index out of range")
            if np.any((dp.u < 0) | (dp.u > 1) | (dp.v < 0) | (dp.v > 1)) or not (
                np.all(np.isfinite(dp.u)) and np.all(np.isfinite(dp.v))
            ):
                problems.append("UV outside [0, 1]")
            bg = dp.part_index == 0
            if np.any(dp.u[bg] != 0) or np.any(dp.v[bg] != 0):
                problems.append("UV nonzero on background")
    return problems


def quantize_uv(values: np.ndarray) -> np.ndarray:
    """Snap UV values to the 16-bit grid used on disk."""
    return (np.round(np.clip(values, 0.0, 1.0) * 65535.0) / 65535.0).astype(np.float32)
