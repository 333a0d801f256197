"""On-disk split layout.

A split directory holds::

    manifest.json        sample_id -> relative file paths, joint order, counts
    skeletons.txt        per sample: "sample <id>" then N lines "joint x y visible"
    images/<id>.png      RGB, 8 bit
    masks/<id>.png       class index, 8 bit
    parts/<id>.png       dense-pose part index, 8 bit (optional per sample)
    u/<id>.png, v/<id>.png   surface coordinates, 16 bit, value / 65535
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from .core_types import (
    JOINT_NAMES,
    NUM_CLASSES,
    NUM_JOINTS,
    NUM_PARTS,
    AnnotatedSample,
    DensePoseMap,
    SegMask,
    Skeleton,
)

MANIFEST_NAME = "manifest.json"
SKELETON_NAME = "skeletons.txt"


def _write_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(array).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im)
    except OSError as exc:
        raise OSError(f"could not read {path}: {exc}") from exc


def format_skeleton(sample_id: str, skeleton: Skeleton) -> str:
    lines = [f"sample {sample_id}"]
    for j, ((x, y), vis) in enumerate(zip(skeleton.joints, skeleton.visibility)):
        lines.append(f"{j} {float(x)!r} {float(y)!r} {int(bool(vis))}")
    return "\n".join(lines) + "\n"


def parse_skeletons(text: str, num_joints: int = NUM_JOINTS) -> dict[str, Skeleton]:
    out = {}
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    i = 0
    while i < len(lines):
        head = lines[i].split(maxsplit=1)
        if head[0] != "sample" or len(head) != 2:
            raise ValueError(f"expected 'sample <id>' record, got {lines[i]!r}")
        sample_id = head[1].strip()
        joints = np.zeros((num_joints, 2), dtype=np.float64)
        vis = np.zeros(num_joints, dtype=bool)
        body = lines[i + 1 : i + 1 + num_joints]
        if len(body) != num_joints:
            raise ValueError(f"sample {sample_id}: expected {num_joints} joint lines")
        for ln in body:
            j, x, y, v = ln.split()
            joints[int(j)] = (float(x), float(y))
            vis[int(j)] = bool(int(v))
        out[sample_id] = Skeleton(joints, vis)
        i += 1 + num_joints
    return out


def write_split(samples: Iterable[AnnotatedSample], out_dir) -> Path:
    """Write samples in the split layout and return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    skeleton_text = []
    for s in samples:
        rec = {
            "sample_id": s.sample_id,
            "image": f"images/{s.sample_id}.png",
            "mask": f"masks/{s.sample_id}.png",
        }
        _write_png(out_dir / rec["image"], np.ascontiguousarray(s.image, dtype=np.uint8))
        _write_png(out_dir / rec["mask"], s.mask.data.astype(np.uint8))
        if s.densepose is not None:
            dp = s.densepose
            rec["parts"] = f"parts/{s.sample_id}.png"
            rec["u"] = f"u/{s.sample_id}.png"
            rec["v"] = f"v/{s.sample_id}.png"
            _write_png(out_dir / rec["parts"], dp.part_index.astype(np.uint8))
            _write_png(out_dir / rec["u"], np.round(dp.u.astype(np.float64) * 65535).astype(np.uint16))
            _write_png(out_dir / rec["v"], np.round(dp.v.astype(np.float64) * 65535).astype(np.uint16))
        records.append(rec)
        skeleton_text.append(format_skeleton(s.sample_id, s.skeleton))

    if not records:
        raise ValueError("refusing to write an empty split")
    skel_path = out_dir / SKELETON_NAME
    try:
        skel_path.write_text("".join(skeleton_text))
    except OSError as exc:
        raise OSError(f"could not write {skel_path}: {exc}") from exc

    manifest = {
        "num_classes": NUM_CLASSES,
        "num_joints": NUM_JOINTS,
        "num_parts": NUM_PARTS,
        "joint_names": list(JOINT_NAMES),
        "skeletons": SKELETON_NAME,
        "samples": records,
    }
    manifest_path = out_dir / MANIFEST_NAME
    try:
        manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")
    except OSError as exc:
        raise OSError(f"could not write {manifest_path}: {exc}") from exc
    return manifest_path


def load_split(manifest_path) -> list[AnnotatedSample]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise OSError(f"could not read {manifest_path}: {exc}") from exc
    root = manifest_path.parent
    num_classes = manifest.get("num_classes", NUM_CLASSES)
    num_parts = manifest.get("num_parts", NUM_PARTS)
    num_joints = manifest.get("num_joints", NUM_JOINTS)

    skeletons: dict[str, Skeleton] = {}
    if manifest.get("skeletons"):
        skeletons = parse_skeletons((root / manifest["skeletons"]).read_text(), num_joints)

    samples = []
    for rec in manifest["samples"]:
        sid = rec["sample_id"]
        image = _read_png(root / rec["image"])
        mask = SegMask(_read_png(root / rec["mask"]).astype(np.int64), num_classes)
        dp: Optional[DensePoseMap] = None
        if rec.get("parts"):
            u = _read_png(root / rec["u"]).astype(np.float64) / 65535.0
            v = _read_png(root / rec["v"]).astype(np.float64) / 65535.0
            dp = DensePoseMap(
                _read_png(root / rec["parts"]).astype(np.int64),
                u.astype(np.float32),
                v.astype(np.float32),
                num_parts,
            )
        skel = skeletons.get(sid)
        if skel is None:
            # no skeleton record: all joints unannotated
            skel = Skeleton(np.zeros((num_joints, 2)), np.zeros(num_joints, dtype=bool))
        samples.append(AnnotatedSample(image=image, mask=mask, skeleton=skel, densepose=dp, sample_id=sid))
    return samples


def has_skeleton_annotations(manifest_path) -> bool:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    return bool(json.loads(manifest_path.read_text()).get("skeletons"))
