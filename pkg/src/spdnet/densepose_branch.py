"""Dense-pose head: multi-scale pooled context, part classification and UV regression.

The whole image stands in for the region of interest, since inputs are
single-person crops; the pooling pyramid supplies the multi-scale context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import conv_bn_relu
from .core_types import DensePoseMap

POOL_FACTORS = (1, 2, 4)


@dataclass
class DensePoseOutput:
    part_logits: torch.Tensor  # (B, P + 1, H, W)
    uv: torch.Tensor  # (B, 2, H, W) in [0, 1]


class DensePoseBranch(nn.Module):
    def __init__(self, cin: int, num_parts: int, context_channels: int):
        super().__init__()
        c = context_channels
        self.num_parts = num_parts
        self.pyramid = nn.ModuleList([conv_bn_relu(cin, c, 1) for _ in POOL_FACTORS])
        self.trunk = nn.Sequential(conv_bn_relu(c * len(POOL_FACTORS), c, 3), conv_bn_relu(c, c, 3))
        self.cls_head = nn.Conv2d(c, num_parts + 1, 1)
        self.reg_head = nn.Conv2d(c, 2, 1)

    def forward(self, res4: torch.Tensor, out_size=None) -> DensePoseOutput:
        h, w = res4.shape[-2:]
        levels = []
        for factor, reduce in zip(POOL_FACTORS, self.pyramid):
            x = res4 if factor == 1 else F.adaptive_avg_pool2d(res4, (max(1, h // factor), max(1, w // factor)))
            x = reduce(x)
            if x.shape[-2:] != (h, w):
                x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
            levels.append(x)
        trunk = self.trunk(torch.cat(levels, dim=1))
        logits = self.cls_head(trunk)
        uv = self.reg_head(trunk)
        if out_size is not None:
            logits = F.interpolate(logits, size=tuple(out_size), mode="bilinear", align_corners=False)
            uv = F.interpolate(uv, size=tuple(out_size), mode="bilinear", align_corners=False)
        return DensePoseOutput(logits, torch.sigmoid(uv))

    def zero_init_heads(self):
        for head in (self.cls_head, self.reg_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)


def predict_densepose(output: DensePoseOutput, index: int = 0) -> DensePoseMap:
    """Decode one batch element: argmax part (ties to the lower index), UV zeroed on background."""
    logits = output.part_logits[index].detach().cpu().numpy()
    uv = output.uv[index].detach().cpu().numpy().astype(np.float32)
    parts = np.argmax(logits, axis=0).astype(np.int64)
    fg = parts > 0
    u = np.where(fg, np.clip(uv[0], 0.0, 1.0), 0.0).astype(np.float32)
    v = np.where(fg, np.clip(uv[1], 0.0, 1.0), 0.0).astype(np.float32)
    return DensePoseMap(parts, u, v, num_parts=logits.shape[0] - 1)
