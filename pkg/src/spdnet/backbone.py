"""Configurable residual feature extractor with taps after stages 4 and 5."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .core_types import ModelConfig


def conv_bn_relu(cin: int, cout: int, kernel: int = 3, stride: int = 1, dilation: int = 1) -> nn.Sequential:
    pad = dilation * (kernel - 1) // 2
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


@dataclass
class BackboneFeatures:
    res4: torch.Tensor
    res5: torch.Tensor


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with an identity or projection shortcut."""

    def __init__(self, cin: int, cout: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout),
            )

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class Backbone(nn.Module):
    def __init__(self, blocks, strides, dilations=None):
        super().__init__()
        blocks = [tuple(b) for b in blocks]
        if len(blocks) != 5:
            raise ValueError(f"backbone needs exactly 5 stages, got {len(blocks)}")
        if len(strides) != 5:
            raise ValueError("stage_strides needs one entry per stage")
        dilations = tuple(dilations) if dilations is not None else (1,) * 5
        for count, width in blocks:
            if width <= 0:
                raise ValueError("channel widths must be positive")
            if count < 1:
                raise ValueError("each stage needs at least one residual unit")
        if strides[0] not in (1, 2, 4) or any(s not in (1, 2) for s in strides[1:]):
            raise ValueError("stem stride must be 1, 2 or 4 and stage strides 1 or 2")

        stem_width = blocks[0][1]
        stem = [conv_bn_relu(3, stem_width, 3, stride=min(strides[0], 2))]
        if strides[0] == 4:
            stem.append(nn.MaxPool2d(3, stride=2, padding=1))
        self.stem = nn.Sequential(*stem)

        stages = []
        cin = stem_width
        for i, (count, width) in enumerate(blocks):
            stride = 1 if i == 0 else strides[i]
            units = [BasicBlock(cin, width, stride, dilations[i])]
            units += [BasicBlock(width, width, 1, dilations[i]) for _ in range(count - 1)]
            stages.append(nn.Sequential(*units))
            cin = width
        self.stages = nn.ModuleList(stages)

        self.res4_channels = blocks[3][1]
        self.res5_channels = blocks[4][1]
        self.res4_stride = strides[0] * strides[1] * strides[2] * strides[3]
        self.res5_stride = self.res4_stride * strides[4]

    def forward(self, image: torch.Tensor) -> BackboneFeatures:
        h, w = image.shape[-2:]
        s = self.res5_stride
        if h % s or w % s:
            raise ValueError(f"input {h}x{w} must be divisible by the backbone stride {s}")
        x = self.stem(image)
        for stage in self.stages[:4]:
            x = stage(x)
        res4 = x
        res5 = self.stages[4](res4)
        return BackboneFeatures(res4=res4, res5=res5)

    def zero_init_last_bn(self):
        """Zero the final batch-norm scale of every residual unit."""
        for m in self.modules():
            if isinstance(m, BasicBlock):
                nn.init.zeros_(m.bn2.weight)


def build_backbone(config: ModelConfig) -> Backbone:
    return Backbone(config.backbone_blocks, config.stage_strides, config.stage_dilations)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
