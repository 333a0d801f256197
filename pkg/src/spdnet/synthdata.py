"""Procedural 2-D capsule humanoids with aligned mask, skeleton and dense-pose labels."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core_types import (
    CLASS_NAMES,
    JOINT_NAMES,
    NUM_JOINTS,
    PART_NAMES,
    AnnotatedSample,
    DensePoseMap,
    SegMask,
    Skeleton,
    quantize_uv,
)
from .dataset import write_split

J = {name: i for i, name in enumerate(JOINT_NAMES)}

# (joint, parent, rest angle relative to parent bone in degrees, length in figure units)
# Angles are in image coordinates (y down); the root bone points up.
# The figure faces the viewer, so its right side is on the image left.
KINEMATIC_TREE = (
    ("pelvis", None, 0.0, 0.0),
    ("thorax", "pelvis", 0.0, 0.30),
    ("upper_neck", "thorax", 0.0, 0.07),
    ("head_top", "upper_neck", 0.0, 0.15),
    ("r_shoulder", "thorax", -90.0, 0.10),
    ("r_elbow", "r_shoulder", -70.0, 0.17),
    ("r_wrist", "r_elbow", 0.0, 0.15),
    ("l_shoulder", "thorax", 90.0, 0.10),
    ("l_elbow", "l_shoulder", 70.0, 0.17),
    ("l_wrist", "l_elbow", 0.0, 0.15),
    ("r_hip", "pelvis", -90.0, 0.07),
    ("r_knee", "r_hip", -85.0, 0.23),
    ("r_ankle", "r_knee", 0.0, 0.22),
    ("l_hip", "pelvis", 90.0, 0.07),
    ("l_knee", "l_hip", 85.0, 0.23),
    ("l_ankle", "l_knee", 0.0, 0.22),
)

# Sampling range (degrees) of each joint's deviation from rest; indexed like JOINT_NAMES.
# The pelvis entry is the global tilt of the whole figure.
ANGLE_RANGES = {
    "pelvis": (-12.0, 12.0),
    "thorax": (-10.0, 10.0),
    "upper_neck": (-15.0, 15.0),
    "head_top": (-15.0, 15.0),
    "r_shoulder": (-15.0, 15.0),
    "r_elbow": (-50.0, 90.0),
    "r_wrist": (-30.0, 100.0),
    "l_shoulder": (-15.0, 15.0),
    "l_elbow": (-90.0, 50.0),
    "l_wrist": (-100.0, 30.0),
    "r_hip": (-10.0, 10.0),
    "r_knee": (-20.0, 25.0),
    "r_ankle": (-30.0, 15.0),
    "l_hip": (-10.0, 10.0),
    "l_knee": (-25.0, 20.0),
    "l_ankle": (-15.0, 30.0),
}

# Capsules in painter's order (later capsules are drawn on top).
# (name, start joint, end joint or None for an end cap, base radius, segmentation rule, dense rule)
# End caps (hands, feet) extend from a joint along a direction derived from the parent limb.
CAPSULES = (
    ("r_hip", "pelvis", "r_hip", 0.065, "pants", "torso"),
    ("l_hip", "pelvis", "l_hip", 0.065, "pants", "torso"),
    ("r_thigh", "r_hip", "r_knee", 0.060, "right_thigh", ("right_thigh_back", "right_thigh_front")),
    ("l_thigh", "l_hip", "l_knee", 0.060, "left_thigh", ("left_thigh_back", "left_thigh_front")),
    ("r_shin", "r_knee", "r_ankle", 0.050, "right_shin", ("right_shin_back", "right_shin_front")),
    ("l_shin", "l_knee", "l_ankle", 0.050, "left_shin", ("left_shin_back", "left_shin_front")),
    ("r_foot", "r_ankle", None, 0.040, "right_shoe", "right_foot"),
    ("l_foot", "l_ankle", None, 0.040, "left_shoe", "left_foot"),
    ("torso", "pelvis", "thorax", 0.105, "torso", "torso"),
    ("r_shoulder", "thorax", "r_shoulder", 0.055, "upper_clothes", "torso"),
    ("l_shoulder", "thorax", "l_shoulder", 0.055, "upper_clothes", "torso"),
    ("neck", "thorax", "upper_neck", 0.040, "neck", "head"),
    ("head", "upper_neck", "head_top", 0.080, "head", "head"),
    ("r_upper_arm", "r_shoulder", "r_elbow", 0.045, "right_upper_arm", ("right_upper_arm_back", "right_upper_arm_front")),
    ("l_upper_arm", "l_shoulder", "l_elbow", 0.045, "left_upper_arm", ("left_upper_arm_back", "left_upper_arm_front")),
    ("r_forearm", "r_elbow", "r_wrist", 0.040, "right_forearm", ("right_forearm_back", "right_forearm_front")),
    ("l_forearm", "l_elbow", "l_wrist", 0.040, "left_forearm", ("left_forearm_back", "left_forearm_front")),
    ("r_hand", "r_wrist", None, 0.040, "right_hand", "right_hand"),
    ("l_hand", "l_wrist", None, 0.040, "left_hand", "left_hand"),
)
NUM_CAPSULES = len(CAPSULES)
_CAPSULE_INDEX = {c[0]: i for i, c in enumerate(CAPSULES)}

# End cap geometry: (parent capsule, extra rotation in degrees, length in figure units)
END_CAPS = {
    "r_foot": ("r_shin", -80.0, 0.07),
    "l_foot": ("l_shin", 80.0, 0.07),
    "r_hand": ("r_forearm", 0.0, 0.06),
    "l_hand": ("l_forearm", 0.0, 0.06),
}

HEAD_HAIR_START = 0.62  # axial position above which the head capsule is hair or hat
TORSO_PANTS_END = 0.22  # axial position below which the torso capsule is pants

CLASS_INDEX = {n: i for i, n in enumerate(CLASS_NAMES)}
PART_INDEX = {n: i for i, n in enumerate(PART_NAMES)}

# Which garment colour each class is painted with.
_GARMENT_OF_CLASS = {
    "hat": "hat",
    "hair": "hair",
    "face": "skin",
    "neck": "skin",
    "upper_clothes": "shirt",
    "pants": "pants",
    "right_upper_arm": "shirt",
    "left_upper_arm": "shirt",
    "right_forearm": "sleeve",
    "left_forearm": "sleeve",
    "right_hand": "skin",
    "left_hand": "skin",
    "right_thigh": "pants",
    "left_thigh": "pants",
    "right_shin": "leg",
    "left_shin": "leg",
    "right_shoe": "shoe",
    "left_shoe": "shoe",
}


@dataclass(frozen=True)
class FigureSpec:
    joint_angles: tuple[float, ...]  # radians, deviation from rest, JOINT_NAMES order
    limb_widths: tuple[float, ...]  # capsule radii in figure units, CAPSULES order
    scale: float  # figure unit as a fraction of the canvas height
    translation: tuple[float, float]  # pelvis position as fractions of (width, height)
    occluder: Optional[tuple[float, float, float, float]] = None  # (x0, y0, x1, y1) canvas fractions
    palette_seed: int = 0

    def __post_init__(self):
        if len(self.joint_angles) != NUM_JOINTS:
            raise ValueError(f"expected {NUM_JOINTS} joint angles")
        if len(self.limb_widths) != NUM_CAPSULES:
            raise ValueError(f"expected {NUM_CAPSULES} limb widths")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if any(not w > 0 for w in self.limb_widths):
            raise ValueError("limb widths must be positive")


def identity_spec(scale: float = 0.8, occluder=None, palette_seed: int = 0) -> FigureSpec:
    """Rest pose, centred, default limb widths."""
    return FigureSpec(
        joint_angles=(0.0,) * NUM_JOINTS,
        limb_widths=tuple(c[3] for c in CAPSULES),
        scale=scale,
        translation=(0.5, 0.52),
        occluder=occluder,
        palette_seed=palette_seed,
    )


def sample_figure(rng_seed: int) -> FigureSpec:
    rng = np.random.default_rng(rng_seed)
    angles = tuple(
        math.radians(float(rng.uniform(*ANGLE_RANGES[name]))) for name in JOINT_NAMES
    )
    widths = tuple(float(c[3] * rng.uniform(0.85, 1.2)) for c in CAPSULES)
    scale = float(rng.uniform(0.72, 0.86))
    translation = (float(rng.uniform(0.44, 0.56)), float(rng.uniform(0.49, 0.55)))
    occluder = None
    if rng.random() < 0.25:
        w, h = rng.uniform(0.2, 0.45), rng.uniform(0.15, 0.35)
        x0, y0 = rng.uniform(0.0, 1.0 - w), rng.uniform(0.45, 1.0 - h)
        occluder = (float(x0), float(y0), float(x0 + w), float(y0 + h))
    return FigureSpec(angles, widths, scale, translation, occluder, int(rng.integers(0, 2**31 - 1)))


def forward_kinematics(spec: FigureSpec, height: int, width: int):
    """Joint positions in pixels and world bone angles (radians) per joint."""
    unit = spec.scale * height
    pos = np.zeros((NUM_JOINTS, 2))
    world = np.zeros(NUM_JOINTS)
    root = J["pelvis"]
    pos[root] = (spec.translation[0] * (width - 1), spec.translation[1] * (height - 1))
    world[root] = -math.pi / 2 + spec.joint_angles[root]
    for name, parent, rest, length in KINEMATIC_TREE[1:]:
        j, p = J[name], J[parent]
        world[j] = world[p] + math.radians(rest) + spec.joint_angles[j]
        pos[j] = pos[p] + unit * length * np.array([math.cos(world[j]), math.sin(world[j])])
    return pos, world


def _capsule_endpoints(spec: FigureSpec, pos, world, height):
    unit = spec.scale * height
    ends = {}
    for name, a, b, *_ in CAPSULES:
        if b is not None:
            ends[name] = (pos[J[a]], pos[J[b]])
    for name, (parent, rot, length) in END_CAPS.items():
        pa, pb = ends[parent]
        ang = math.atan2(pb[1] - pa[1], pb[0] - pa[0]) + math.radians(rot)
        start = pos[J[CAPSULES[_CAPSULE_INDEX[name]][1]]]
        ends[name] = (start, start + unit * length * np.array([math.cos(ang), math.sin(ang)]))
    return ends



def capsule_geometry(points: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float):
    """Inside flag, axial position u and perpendicular position v of points w.r.t. a capsule.

    ``points`` is (..., 2). ``u`` is the clamped projection onto the axis (0 at ``a``),
    ``v`` maps the signed perpendicular offset from [-radius, radius] to [0, 1].
    """
    axis = b - a
    length_sq = float(axis @ axis)
    rel = points - a
    if length_sq == 0.0:
        t = np.zeros(points.shape[:-1])
        perp = np.zeros(points.shape[:-1])
    else:
        t = np.clip((rel @ axis) / length_sq, 0.0, 1.0)
        perp = (axis[0] * rel[..., 1] - axis[1] * rel[..., 0]) / math.sqrt(length_sq)
    nearest = a + t[..., None] * axis
    dist = np.linalg.norm(points - nearest, axis=-1)
    inside = dist <= radius
    v = np.clip(0.5 + perp / (2.0 * radius), 0.0, 1.0)
    return inside, t, v


def _seg_class(rule: str, u: np.ndarray, has_hat: bool) -> np.ndarray:
    if rule == "head":
        top = CLASS_INDEX["hat"] if has_hat else CLASS_INDEX["hair"]
        return np.where(u >= HEAD_HAIR_START, top, CLASS_INDEX["face"])
    if rule == "torso":
        return np.where(u < TORSO_PANTS_END, CLASS_INDEX["pants"], CLASS_INDEX["upper_clothes"])
    return np.full(u.shape, CLASS_INDEX[rule])


def _part_index(rule, v: np.ndarray) -> np.ndarray:
    if rule == "torso":
        rule = ("torso_back", "torso_front")
    elif rule == "head":
        rule = ("head_right", "head_left")
    if isinstance(rule, tuple):
        return np.where(v < 0.5, PART_INDEX[rule[0]], PART_INDEX[rule[1]])
    return np.full(v.shape, PART_INDEX[rule])


def capsule_classes(capsule_name: str) -> set[int]:
    """Every segmentation class a capsule can produce."""
    rule = CAPSULES[_CAPSULE_INDEX[capsule_name]][4]
    if rule == "head":
        return {CLASS_INDEX["hat"], CLASS_INDEX["hair"], CLASS_INDEX["face"]}
    if rule == "torso":
        return {CLASS_INDEX["pants"], CLASS_INDEX["upper_clothes"]}
    return {CLASS_INDEX[rule]}


def incident_capsules(joint: str) -> list[str]:
    """Capsules that have ``joint`` as an endpoint."""
    return [c[0] for c in CAPSULES if joint in (c[1], c[2])]


def joint_classes(joint: str) -> set[int]:
    out = set()
    for cap in incident_capsules(joint):
        out |= capsule_classes(cap)
    return out


def joint_tolerance(spec: FigureSpec, joint: str, height: int) -> float:
    """Pixel radius around a joint within which an incident part must show for it to be visible."""
    radii = [spec.limb_widths[_CAPSULE_INDEX[c]] for c in incident_capsules(joint)]
    return max(1.0, 0.5 * max(radii) * spec.scale * height)


def _palette(seed: int):
    rng = np.random.default_rng(seed)
    skin = rng.uniform([150, 100, 70], [240, 200, 170])
    colours = {
        "skin": skin,
        "hair": rng.uniform([10, 10, 10], [120, 90, 60]),
        "hat": rng.uniform(0, 255, 3),
        "shirt": rng.uniform(0, 255, 3),
        "pants": rng.uniform(0, 200, 3),
        "shoe": rng.uniform(0, 120, 3),
    }
    colours["sleeve"] = colours["shirt"] if rng.random() < 0.5 else skin
    colours["leg"] = colours["pants"] if rng.random() < 0.6 else skin
    background = (rng.uniform(40, 220, 3), rng.uniform(40, 220, 3))
    occluder = rng.uniform(0, 255, 3)
    has_hat = bool(rng.random() < 0.3)
    return colours, background, occluder, has_hat, int(rng.integers(0, 2**31 - 1))


def render_sample(spec: FigureSpec, height: int = 64, width: int = 64, sample_id: str = "") -> AnnotatedSample:
    if height < 64 or width < 64:
        raise ValueError("canvas must be at least 64x64")
    pos, world = forward_kinematics(spec, height, width)
    ends = _capsule_endpoints(spec, pos, world, height)
    colours, background, occ_colour, has_hat, noise_seed = _palette(spec.palette_seed)
    unit = spec.scale * height

    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    grid = np.stack([xs, ys], axis=-1)

    mask = np.zeros((height, width), dtype=np.int64)
    parts = np.zeros((height, width), dtype=np.int64)
    u_map = np.zeros((height, width))
    v_map = np.zeros((height, width))
    shade = np.zeros((height, width))
    for (name, _, _, _, seg_rule, dense_rule), radius in zip(CAPSULES, spec.limb_widths):
        a, b = ends[name]
        inside, u, v = capsule_geometry(grid, a, b, radius * unit)
        if not inside.any():
            continue
        mask[inside] = _seg_class(seg_rule, u[inside], has_hat)
        parts[inside] = _part_index(dense_rule, v[inside])
        u_map[inside] = u[inside]
        v_map[inside] = v[inside]
        shade[inside] = 1.0 - 0.35 * np.abs(v[inside] - 0.5)

    if not (mask > 0).any():
        raise ValueError("figure projects entirely outside the canvas")

    # background: two-colour vertical gradient plus low-amplitude noise
    rng = np.random.default_rng(noise_seed)
    t = (ys / max(height - 1, 1))[..., None]
    image = background[0] * (1 - t) + background[1] * t
    image = image + rng.normal(0.0, 12.0, (height, width, 3))

    fg = mask > 0
    names = np.array([_GARMENT_OF_CLASS.get(n, "skin") for n in CLASS_NAMES])
    for garment, colour in colours.items():
        sel = fg & (names[mask] == garment)
        image[sel] = colour * shade[sel][:, None]
    image[fg] += rng.normal(0.0, 6.0, (int(fg.sum()), 3))

    if spec.occluder is not None:
        x0, y0, x1, y1 = spec.occluder
        occ = (xs >= x0 * width) & (xs < x1 * width) & (ys >= y0 * height) & (ys < y1 * height)
        image[occ] = occ_colour
        mask[occ] = 0
        parts[occ] = 0
        u_map[occ] = 0.0
        v_map[occ] = 0.0

    image = np.clip(np.round(image), 0, 255).astype(np.uint8)
    u_map = np.where(parts > 0, u_map, 0.0)
    v_map = np.where(parts > 0, v_map, 0.0)

    visibility = np.zeros(NUM_JOINTS, dtype=bool)
    for name in JOINT_NAMES:
        j = J[name]
        x, y = pos[j]
        if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
            continue
        tol = joint_tolerance(spec, name, height)
        near = np.hypot(xs - x, ys - y) <= tol
        visibility[j] = bool(np.isin(mask[near], list(joint_classes(name))).any())

    return AnnotatedSample(
        image=image,
        mask=SegMask(mask),
        skeleton=Skeleton(pos.copy(), visibility),
        densepose=DensePoseMap(parts, quantize_uv(u_map), quantize_uv(v_map)),
        sample_id=sample_id,
    )


def sample_seed(base_seed: int, index: int, attempt: int = 0) -> int:
    return int(np.random.SeedSequence([base_seed, index, attempt]).generate_state(1)[0])


def generate_sample(base_seed: int, index: int, height: int = 64, width: int = 64) -> AnnotatedSample:
    for attempt in range(100):
        try:
            spec = sample_figure(sample_seed(base_seed, index, attempt))
            return render_sample(spec, height, width, sample_id=f"{index:06d}")
        except ValueError:
            continue
    raise RuntimeError(f"could not render sample {index} for seed {base_seed}")


def generate_samples(count: int, base_seed: int, height: int = 64, width: int = 64, workers: int = 1):
    if count < 1:
        raise ValueError("count must be at least 1")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda i: generate_sample(base_seed, i, height, width), range(count)))
    return [generate_sample(base_seed, i, height, width) for i in range(count)]


def generate_split(count: int, base_seed: int, out_dir, height: int = 64, width: int = 64, workers: int = 1) -> Path:
    samples = generate_samples(count, base_seed, height, width, workers)
    return write_split(samples, Path(out_dir))
