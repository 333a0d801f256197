"""Overlay images and training plots."""

from __future__ import annotations

import colorsys
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from .core_types import CLASS_NAMES, JOINT_NAMES, AnnotatedSample, Skeleton  # noqa: E402
from .densepose_branch import predict_densepose  # noqa: E402
from .model import SPDModel  # noqa: E402
from .objectives import LossBreakdown  # noqa: E402
from .pose_branch import to_pixels  # noqa: E402
from .seg_branch import predict_mask  # noqa: E402
from .synthdata import KINEMATIC_TREE  # noqa: E402
from .trainer import normalize_image  # noqa: E402

OVERLAY_KINDS = ("input", "target", "prediction", "skeleton", "parts")
BONES = tuple((JOINT_NAMES.index(j), JOINT_NAMES.index(p)) for j, p, _, _ in KINEMATIC_TREE if p is not None)
PNG_META = {"Software": None}


def palette(n: int) -> np.ndarray:
    """(n, 3) uint8 colours; index 0 is black and hues step by the golden ratio."""
    out = np.zeros((n, 3), np.uint8)
    for i in range(1, n):
        hue = (i * 0.618033988749895) % 1.0
        sat = 0.65 if i % 2 else 0.9
        out[i] = np.round(np.array(colorsys.hsv_to_rgb(hue, sat, 0.95)) * 255)
    return out


def blend(image: np.ndarray, labels: np.ndarray, colours: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    painted = colours[labels].astype(np.float64)
    out = image.astype(np.float64)
    fg = labels > 0
    out[fg] = (1 - alpha) * out[fg] + alpha * painted[fg]
    return np.round(out).astype(np.uint8)


def _upscale(array: np.ndarray, scale: int) -> Image.Image:
    img = Image.fromarray(array)
    return img.resize((img.width * scale, img.height * scale), Image.NEAREST) if scale > 1 else img


def draw_skeleton(img: Image.Image, skeleton: Skeleton, scale: int, colour, width: int = 2):
    draw = ImageDraw.Draw(img)
    pts = (np.asarray(skeleton.joints, np.float64) + 0.5) * scale
    vis = np.asarray(skeleton.visibility, bool)
    for a, b in BONES:
        if vis[a] and vis[b]:
            draw.line([tuple(pts[a]), tuple(pts[b])], fill=colour, width=width)
    r = max(1, scale // 2)
    for (x, y), v in zip(pts, vis):
        if v:
            draw.ellipse([x - r, y - r, x + r, y + r], fill=colour)


def predict_sample(model: SPDModel, sample: AnnotatedSample):
    model.eval()
    with torch.no_grad():
        out = model(normalize_image(sample.image).unsqueeze(0))
    h, w = sample.shape
    mask = predict_mask(out.seg.final_logits)[0]
    skeleton = to_pixels(out.pose.refined_coords[0], h, w) if out.pose is not None else None
    dense = predict_densepose(out.dense, 0) if out.dense is not None else None
    return mask, skeleton, dense


def write_overlays(model: SPDModel, sample: AnnotatedSample, out_dir, scale: int = 4) -> list[Path]:
    """Five PNGs for one sample; returns their paths in OVERLAY_KINDS order.

    The skeleton panel draws the annotation in white and the prediction in red.
    The parts panel shows predicted part indices when the model has a dense-pose
    branch and the annotated ones otherwise.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask, skeleton, dense = predict_sample(model, sample)
    class_colours = palette(len(CLASS_NAMES))
    if dense is not None:
        parts = dense.part_index
    elif sample.densepose is not None:
        parts = sample.densepose.part_index
    else:
        parts = np.zeros(sample.shape, np.uint8)

    skel_img = _upscale(sample.image, scale)
    draw_skeleton(skel_img, sample.skeleton, scale, (255, 255, 255))
    if skeleton is not None:
        draw_skeleton(skel_img, skeleton, scale, (230, 40, 40), width=1)

    images = {
        "input": _upscale(sample.image, scale),
        "target": _upscale(blend(sample.image, sample.mask.data, class_colours), scale),
        "prediction": _upscale(blend(sample.image, mask, class_colours), scale),
        "skeleton": skel_img,
        "parts": _upscale(blend(sample.image, parts, palette(model.config.num_parts + 1)), scale),
    }
    paths = []
    for kind in OVERLAY_KINDS:
        path = out_dir / f"{sample.sample_id}_{kind}.png"
        images[kind].save(path, format="PNG")
        paths.append(path)
    return paths


def plot_losses(history: Sequence[LossBreakdown], path) -> np.ndarray:
    """Loss curves against iteration; returns the x values plotted."""
    if not history:
        raise ValueError("no logged iterations to plot")
    x = np.arange(1, len(history) + 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name in ("l_seg", "l_pose", "l_dense", "total"):
        ax.plot(x, [getattr(h, name) for h in history], label=name, lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=PNG_META)
    plt.close(fig)
    return x


def plot_class_iou(ious: Sequence[Optional[float]], path, names: Sequence[str] = CLASS_NAMES) -> None:
    vals = [np.nan if v is None else v for v in ious]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(np.arange(len(vals)), vals, color=palette(len(vals))[:, :] / 255.0, edgecolor="k", lw=0.5)
    ax.set_xticks(np.arange(len(vals)))
    ax.set_xticklabels(names[: len(vals)], rotation=70, fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=PNG_META)
    plt.close(fig)
