"""Procedural 2-D multi-person scenes with exact part labels and keypoints.

Avatars are front-facing stick figures fleshed out with capsules, discs and
a torso quad. The body's left side is drawn on the image's right. Every
primitive is rasterised by testing pixel centres, so labels are exact and
generation is deterministic given the RNG.

Two domains come out of the same engine:

* synthetic -- flat "room" backgrounds (or composited textures), clean
  shading, part labels exposed to training;
* real (pseudo-real) -- cluttered procedural backgrounds, clothing texture,
  photometric jitter and sensor noise; part labels withheld for evaluation.

Dataset layout written by :func:`generate_dataset`::

    out_dir/
      manifest.json            {"format": "cdcl-dataset", "version": 1,
                                "config": {...}, "count": n,
                                "samples": [{"id", "domain", "image",
                                             "labels", "annotation"}, ...]}
      images/000000.png        RGB
      labels/000000.png        indexed PNG, pixel value == part index
      annotations/000000.json  persons, ignore regions, domain

For real-domain samples the label PNG holds the withheld evaluation labels.
"""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from PIL import Image

from .data import ABSENT, LABELED, REAL, SYNTHETIC, AnnotatedSample, PersonAnnotation
from .skeleton import PART_CLASSES_14, COCO_KEYPOINTS, NOVEL_EXTRA_KEYPOINTS

log = logging.getLogger(__name__)

APPEARANCES = ("original", "no_background", "grayscale", "binary_mask")
BACKGROUNDS = ("blank_room", "composite")

DATASET_FORMAT = "cdcl-dataset"
DATASET_VERSION = 1

# style pools for the two domains never share a seed
_SYN_STYLE_BASE = 10_000
_REAL_STYLE_BASE = 20_000
_TEXTURE_BASE = 30_000
_MAX_POSE_TRIES = 50

PART = {name: i for i, name in enumerate(PART_CLASSES_14)}
KP17 = {name: i for i, name in enumerate(COCO_KEYPOINTS)}
KP30 = {name: i for i, name in enumerate(COCO_KEYPOINTS + NOVEL_EXTRA_KEYPOINTS)}

# parts a keypoint may sit on (for visibility under occlusion)
_OWNER = {
    "nose": ("head",), "left_eye": ("head",), "right_eye": ("head",),
    "left_ear": ("head",), "right_ear": ("head",), "neck": ("head", "torso"),
    "left_shoulder": ("left_upper_arm", "torso"), "right_shoulder": ("right_upper_arm", "torso"),
    "left_elbow": ("left_upper_arm", "left_lower_arm"), "right_elbow": ("right_upper_arm", "right_lower_arm"),
    "left_wrist": ("left_lower_arm", "left_hand"), "right_wrist": ("right_lower_arm", "right_hand"),
    "left_hip": ("torso", "left_upper_leg"), "right_hip": ("torso", "right_upper_leg"),
    "left_knee": ("left_upper_leg", "left_lower_leg"), "right_knee": ("right_upper_leg", "right_lower_leg"),
    "left_ankle": ("left_lower_leg", "left_foot"), "right_ankle": ("right_lower_leg", "right_foot"),
    "left_palm": ("left_hand",), "left_thumb": ("left_hand",), "left_index": ("left_hand",),
    "left_pinky": ("left_hand",), "right_palm": ("right_hand",), "right_thumb": ("right_hand",),
    "right_index": ("right_hand",), "right_pinky": ("right_hand",),
    "left_heel": ("left_foot",), "left_toe": ("left_foot",),
    "right_heel": ("right_foot",), "right_toe": ("right_foot",),
}
KEYPOINT_OWNERS = {name: tuple(PART[p] for p in parts) for name, parts in _OWNER.items()}


@dataclass
class SceneConfig:
    image_size: tuple = (64, 64)
    persons_range: tuple = (1, 3)
    model_pool_size: int = 20
    appearance: str = "original"
    background: str = "blank_room"
    n_backgrounds: int = 1
    height_range: tuple = (34.0, 54.0)
    min_separation: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.persons_range = tuple(int(v) for v in self.persons_range)
        self.height_range = tuple(float(v) for v in self.height_range)
        lo, hi = self.persons_range
        if not 1 <= lo <= hi:
            raise ValueError(f"persons_range must satisfy 1 <= min <= max, got {self.persons_range}")
        if self.model_pool_size < 1:
            raise ValueError("model_pool_size must be >= 1")
        if self.appearance not in APPEARANCES:
            raise ValueError(f"appearance must be one of {APPEARANCES}, got {self.appearance!r}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}, got {self.background!r}")
        if self.background == "composite" and self.n_backgrounds < 1:
            raise ValueError("composite backgrounds need n_backgrounds >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


# -- avatar styles ---------------------------------------------------------

@dataclass
class AvatarStyle:
    skin: np.ndarray
    shirt: np.ndarray
    pants: np.ndarray
    shoes: np.ndarray
    long_sleeves: bool
    long_pants: bool
    thickness: float
    limb_length: float
    shoulder_width: float
    stripes: float = 0.0  # clothing stripe contrast (pseudo-real only)


def _color(rng, lo=20, hi=235):
    return rng.uniform(lo, hi, size=3)


def avatar_style(index: int, base: int) -> AvatarStyle:
    rng = np.random.default_rng([base, index])
    skin_tone = rng.uniform(0.35, 1.0)
    skin = np.array([235, 190, 160]) * skin_tone + np.array([10, 5, 0])
    return AvatarStyle(
        skin=skin,
        shirt=_color(rng),
        pants=_color(rng, 15, 200),
        shoes=_color(rng, 10, 90),
        long_sleeves=bool(rng.random() < 0.5),
        long_pants=bool(rng.random() < 0.75),
        thickness=float(rng.uniform(0.85, 1.25)),
        limb_length=float(rng.uniform(0.92, 1.08)),
        shoulder_width=float(rng.uniform(0.85, 1.15)),
        stripes=float(rng.uniform(0.0, 0.35)) if base == _REAL_STYLE_BASE else 0.0,
    )


# -- pose prior ------------------------------------------------------------

@dataclass
class Pose:
    """Joint positions (image px) and primitive radii of one avatar."""

    points: dict
    radii: dict
    unit: float


def _unit(v):
    return v / max(np.hypot(v[0], v[1]), 1e-12)


def _rot(v, ang):
    c, s = math.cos(ang), math.sin(ang)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def sample_pose(rng: np.random.Generator, height: float, style: AvatarStyle) -> Pose:
    """Sample joint angles around a canonical figure, pelvis at the origin.

    Angle ranges (radians, measured from the torso's downward axis, positive
    turning outward): torso tilt +-0.25, head tilt +-0.3, upper arm
    [0.1, 2.6], elbow bend +-1.8, upper leg [-0.1, 0.65], knee bend +-0.6.
    Poses whose legs cross are rejected.
    """
    u = height / 8.3  # "head units"
    L = style.limb_length
    for _ in range(_MAX_POSE_TRIES):
        t = rng.uniform(-0.25, 0.25)
        up = np.array([math.sin(t), -math.cos(t)])
        down = -up
        perp = np.array([math.cos(t), math.sin(t)])  # body-left == image +x
        pts = {}
        pelvis = np.zeros(2)
        neck = pelvis + 2.9 * u * up
        sw = 0.95 * u * style.shoulder_width
        hw = 0.55 * u * style.shoulder_width
        pts["neck"] = neck
        pts["left_shoulder"] = neck + sw * perp + 0.25 * u * down
        pts["right_shoulder"] = neck - sw * perp + 0.25 * u * down
        pts["left_hip"] = pelvis + hw * perp
        pts["right_hip"] = pelvis - hw * perp

        h = rng.uniform(-0.3, 0.3)
        ha, hp = _rot(up, h), _rot(perp, h)
        head_r = 0.58 * u
        hc = neck + 0.9 * u * ha
        pts["head_center"] = hc
        pts["nose"] = hc - 0.12 * u * ha
        pts["left_eye"] = hc + 0.24 * u * hp + 0.14 * u * ha
        pts["right_eye"] = hc - 0.24 * u * hp + 0.14 * u * ha
        pts["left_ear"] = hc + head_r * hp
        pts["right_ear"] = hc - head_r * hp

        for side, sgn in (("left", 1.0), ("right", -1.0)):
            a1 = rng.uniform(0.1, 2.6)
            a2 = a1 + rng.uniform(-1.8, 1.8)
            d1 = math.cos(a1) * down + sgn * math.sin(a1) * perp
            d2 = math.cos(a2) * down + sgn * math.sin(a2) * perp
            sh = pts[f"{side}_shoulder"]
            el = sh + 1.45 * u * L * d1
            wr = el + 1.25 * u * L * d2
            hand_r = 0.34 * u * style.thickness
            palm = wr + 0.4 * u * d2
            pts[f"{side}_elbow"], pts[f"{side}_wrist"], pts[f"{side}_palm"] = el, wr, palm
            pts[f"{side}_thumb"] = palm + hand_r * _rot(d2, -sgn * 1.2)
            pts[f"{side}_index"] = palm + hand_r * _rot(d2, -sgn * 0.35)
            pts[f"{side}_pinky"] = palm + hand_r * _rot(d2, sgn * 0.9)

            l1 = rng.uniform(-0.1, 0.65)
            l2 = l1 + rng.uniform(-0.6, 0.6)
            e1 = math.cos(l1) * down + sgn * math.sin(l1) * perp
            e2 = math.cos(l2) * down + sgn * math.sin(l2) * perp
            hip = pts[f"{side}_hip"]
            kn = hip + 2.0 * u * L * e1
            an = kn + 1.9 * u * L * e2
            pts[f"{side}_knee"], pts[f"{side}_ankle"] = kn, an
            pts[f"{side}_heel"] = an + 0.25 * u * down
            pts[f"{side}_toe"] = an + 0.3 * u * down + sgn * 0.7 * u * perp

        if _segments_cross(pts["left_hip"], pts["left_ankle"], pts["right_hip"], pts["right_ankle"]):
            continue
        if _segments_cross(pts["left_knee"], pts["left_ankle"], pts["right_knee"], pts["right_ankle"]):
            continue
        k = style.thickness
        radii = {
            "head": head_r, "neck": 0.27 * u * k, "upper_arm": 0.32 * u * k, "lower_arm": 0.27 * u * k,
            "hand": 0.34 * u * k, "upper_leg": 0.42 * u * k, "lower_leg": 0.34 * u * k,
            "foot": 0.24 * u * k, "torso_round": 0.3 * u * k,
        }
        return Pose(pts, radii, u)
    raise RuntimeError(f"no valid pose after {_MAX_POSE_TRIES} tries")


# -- rasterisation ---------------------------------------------------------

def _capsule(xx, yy, a, b, r):
    d = b - a
    dd = float(d @ d)
    if dd < 1e-12:
        dist2 = (xx - a[0]) ** 2 + (yy - a[1]) ** 2
        return dist2 <= r * r, np.sqrt(dist2) / r
    t = np.clip(((xx - a[0]) * d[0] + (yy - a[1]) * d[1]) / dd, 0.0, 1.0)
    dx, dy = xx - (a[0] + t * d[0]), yy - (a[1] + t * d[1])
    dist = np.sqrt(dx * dx + dy * dy)
    return dist <= r, dist / r


def _disc(xx, yy, c, r):
    dist = np.sqrt((xx - c[0]) ** 2 + (yy - c[1]) ** 2)
    return dist <= r, dist / r


def _quad(xx, yy, poly):
    inside = np.ones(xx.shape, dtype=bool)
    n = len(poly)
    area = sum(poly[i][0] * poly[(i + 1) % n][1] - poly[(i + 1) % n][0] * poly[i][1] for i in range(n))
    sgn = 1.0 if area > 0 else -1.0
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        cross = (b[0] - a[0]) * (yy - a[1]) - (b[1] - a[1]) * (xx - a[0])
        inside &= sgn * cross >= 0
    return inside, np.zeros(xx.shape)


def _primitives(pose: Pose):
    """(part name, kind, geometry, clothing slot) in painting order."""
    p, r = pose.points, pose.radii
    prims = [
        ("torso", "quad", (p["left_shoulder"], p["right_shoulder"], p["right_hip"], p["left_hip"]), "shirt"),
        ("torso", "capsule", (p["left_shoulder"], p["right_shoulder"], r["torso_round"]), "shirt"),
    ]
    for side in ("left", "right"):
        prims += [
            (f"{side}_upper_leg", "capsule", (p[f"{side}_hip"], p[f"{side}_knee"], r["upper_leg"]), "pants"),
            (f"{side}_lower_leg", "capsule", (p[f"{side}_knee"], p[f"{side}_ankle"], r["lower_leg"]), "lower_leg"),
            (f"{side}_foot", "capsule", (p[f"{side}_heel"], p[f"{side}_toe"], r["foot"]), "shoes"),
        ]
    prims += [
        ("head", "capsule", (p["neck"], p["head_center"], r["neck"]), "skin"),
        ("head", "disc", (p["head_center"], r["head"]), "skin"),
    ]
    for side in ("left", "right"):
        prims += [
            (f"{side}_upper_arm", "capsule", (p[f"{side}_shoulder"], p[f"{side}_elbow"], r["upper_arm"]), "shirt"),
            (f"{side}_lower_arm", "capsule", (p[f"{side}_elbow"], p[f"{side}_wrist"], r["lower_arm"]), "lower_arm"),
            (f"{side}_hand", "disc", (p[f"{side}_palm"], r["hand"]), "skin"),
        ]
    return prims


# per-part brightness so clothing seams stay faintly visible
_PART_SHADE = {
    "head": 1.0, "torso": 1.0, "left_upper_arm": 0.93, "right_upper_arm": 0.93,
    "left_lower_arm": 0.86, "right_lower_arm": 0.86, "left_hand": 0.95, "right_hand": 0.95,
    "left_upper_leg": 0.95, "right_upper_leg": 0.95, "left_lower_leg": 0.87, "right_lower_leg": 0.87,
    "left_foot": 1.0, "right_foot": 1.0,
}


def _slot_color(style: AvatarStyle, slot: str) -> np.ndarray:
    if slot == "lower_arm":
        return style.shirt if style.long_sleeves else style.skin
    if slot == "lower_leg":
        return style.pants if style.long_pants else style.skin
    return getattr(style, slot)


def _bbox(prims, pad=1.0):
    pts = []
    for _, kind, geo, _ in prims:
        if kind == "quad":
            pts += [np.asarray(q) for q in geo]
        elif kind == "capsule":
            a, b, r = geo
            pts += [a - r, a + r, b - r, b + r]
        else:
            c, r = geo
            pts += [c - r, c + r]
    pts = np.array(pts)
    lo, hi = pts.min(axis=0) - pad, pts.max(axis=0) + pad
    return lo, hi


def _paint_person(canvas, labels, instances, pid, pose: Pose, offset, style: AvatarStyle, rng, texture: bool):
    H, W = labels.shape
    prims = _primitives(pose)
    lo, hi = _bbox(prims)
    x0, y0 = max(int(math.floor(lo[0] + offset[0])), 0), max(int(math.floor(lo[1] + offset[1])), 0)
    x1, y1 = min(int(math.ceil(hi[0] + offset[0])) + 1, W), min(int(math.ceil(hi[1] + offset[1])) + 1, H)
    if x1 <= x0 or y1 <= y0:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    xx -= offset[0]
    yy -= offset[1]
    stripe_phase = rng.uniform(0, 2 * math.pi)
    stripe_freq = rng.uniform(0.6, 1.4)
    for part, kind, geo, slot in prims:
        if kind == "capsule":
            mask, rel = _capsule(xx, yy, *geo)
        elif kind == "disc":
            mask, rel = _disc(xx, yy, *geo)
        else:
            mask, rel = _quad(xx, yy, geo)
        if not mask.any():
            continue
        base = _slot_color(style, slot) * _PART_SHADE[part]
        shade = 1.0 - 0.3 * np.clip(rel, 0, 1) ** 2
        col = base[None, None, :] * shade[..., None]
        if texture and style.stripes > 0 and slot in ("shirt", "pants", "lower_arm", "lower_leg"):
            col = col * (1.0 + style.stripes * np.sin(stripe_freq * (xx + 0.5 * yy) + stripe_phase))[..., None]
        region = canvas[y0:y1, x0:x1]
        region[mask] = col[mask]
        labels[y0:y1, x0:x1][mask] = PART[part]
        instances[y0:y1, x0:x1][mask] = pid


# -- backgrounds -----------------------------------------------------------

def blank_room(rng, shape) -> np.ndarray:
    """Near-white wall over a slightly darker floor."""
    H, W = shape
    wall = rng.uniform(205, 240) + rng.uniform(-8, 8, size=3)
    floor = wall * rng.uniform(0.82, 0.92)
    horizon = int(H * rng.uniform(0.6, 0.8))
    img = np.empty((H, W, 3))
    grad = np.linspace(1.0, 0.96, H)[:, None, None]
    img[:] = wall * grad
    img[horizon:] = floor
    return img


def _smooth_noise(rng, shape, cells):
    H, W = shape
    coarse = rng.random((cells + 1, cells + 1, 3))
    ys = np.linspace(0, cells, H)
    xs = np.linspace(0, cells, W)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (c00 * (1 - fx) + c01 * fx) * (1 - fy) + (c10 * (1 - fx) + c11 * fx) * fy


def clutter_texture(rng, shape) -> np.ndarray:
    """Cluttered scene stand-in: smooth colour noise, gratings and random shapes."""
    H, W = shape
    img = _smooth_noise(rng, shape, int(rng.integers(2, 6))) * rng.uniform(90, 230)
    img += rng.uniform(0, 60, size=3)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    for _ in range(int(rng.integers(1, 3))):
        ang = rng.uniform(0, math.pi)
        freq = rng.uniform(0.15, 0.9)
        amp = rng.uniform(10, 45)
        img += amp * np.sin(freq * (xx * math.cos(ang) + yy * math.sin(ang)))[..., None] * rng.uniform(0.3, 1, 3)
    for _ in range(int(rng.integers(3, 9))):
        col = _color(rng, 0, 255)
        cx, cy = rng.uniform(0, W), rng.uniform(0, H)
        if rng.random() < 0.5:
            w, h = rng.uniform(2, W / 2.5), rng.uniform(2, H / 2.5)
            m = (np.abs(xx - cx) <= w / 2) & (np.abs(yy - cy) <= h / 2)
        else:
            a, b = rng.uniform(2, W / 4), rng.uniform(2, H / 4)
            m = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1
        img[m] = col
    return np.clip(img, 0, 255)


def composite_background(rng, shape, n_backgrounds: int) -> np.ndarray:
    k = int(rng.integers(n_backgrounds))
    return clutter_texture(np.random.default_rng([_TEXTURE_BASE, k]), shape)


# -- scenes ----------------------------------------------------------------

def _place_persons(rng, config: SceneConfig, n: int, style_base: int):
    H, W = config.image_size
    placed, boxes = [], []
    sep = config.min_separation or 0.0
    for _ in range(n):
        for _attempt in range(_MAX_POSE_TRIES):
            style_idx = int(rng.integers(config.model_pool_size))
            style = avatar_style(style_idx, style_base)
            height = rng.uniform(*config.height_range)
            pose = sample_pose(rng, height, style)
            lo, hi = _bbox(_primitives(pose), pad=0.5)
            span = hi - lo
            if span[0] > W - 1 or span[1] > H - 1:
                continue
            ox = rng.uniform(-lo[0], W - 1 - hi[0])
            oy = rng.uniform(-lo[1], H - 1 - hi[1])
            box = (lo[0] + ox, lo[1] + oy, hi[0] + ox, hi[1] + oy)
            if config.min_separation is not None and any(
                box[0] < b[2] + sep and b[0] < box[2] + sep and box[1] < b[3] + sep and b[1] < box[3] + sep
                for b in boxes
            ):
                continue
            boxes.append(box)
            placed.append((pose, np.array([ox, oy]), style))
            break
        else:
            log.warning("could not place person %d/%d after %d tries; scene has fewer persons",
                        len(placed) + 1, n, _MAX_POSE_TRIES)
    return placed


def _keypoint_arrays(pose: Pose, offset, labels, instances, pid):
    H, W = labels.shape
    kp17 = np.zeros((17, 3))
    kp30 = np.zeros((30, 3))
    for name, owners in KEYPOINT_OWNERS.items():
        x, y = pose.points[name] + offset
        vis = ABSENT
        if 0 <= x <= W - 1 and 0 <= y <= H - 1:
            x0, x1 = max(int(math.floor(x - 2)), 0), min(int(math.ceil(x + 2)) + 1, W)
            y0, y1 = max(int(math.floor(y - 2)), 0), min(int(math.ceil(y + 2)) + 1, H)
            yy, xx = np.mgrid[y0:y1, x0:x1]
            near = (xx - x) ** 2 + (yy - y) ** 2 <= 4.0
            own = (instances[y0:y1, x0:x1] == pid) & np.isin(labels[y0:y1, x0:x1], owners)
            vis = LABELED if (near & own).any() else ABSENT
        row = (x, y, vis)
        kp30[KP30[name]] = row
        if name in KP17:
            kp17[KP17[name]] = row
    return kp17, kp30


def _render(config: SceneConfig, rng: np.random.Generator, domain: str) -> AnnotatedSample:
    H, W = config.image_size
    n = int(rng.integers(config.persons_range[0], config.persons_range[1] + 1))
    real = domain == REAL
    style_base = _REAL_STYLE_BASE if real else _SYN_STYLE_BASE
    people = _place_persons(rng, config, n, style_base)

    if real:
        canvas = clutter_texture(rng, (H, W))
    elif config.background == "composite":
        canvas = composite_background(rng, (H, W), config.n_backgrounds)
    else:
        canvas = blank_room(rng, (H, W))
    labels = np.zeros((H, W), dtype=np.uint8)
    instances = np.full((H, W), -1, dtype=np.int16)
    for pid, (pose, offset, style) in enumerate(people):
        _paint_person(canvas, labels, instances, pid, pose, offset, style, rng, texture=real)

    persons = []
    for pid, (pose, offset, _) in enumerate(people):
        kp17, kp30 = _keypoint_arrays(pose, offset, labels, instances, pid)
        persons.append(PersonAnnotation(kp17, kp30))

    if real:
        canvas = _photometric_jitter(rng, canvas)
    else:
        canvas = _apply_appearance(canvas, labels, config.appearance)
    image = np.clip(np.round(canvas), 0, 255).astype(np.uint8)
    sample = AnnotatedSample(image=image, domain=domain, persons=persons, ignore_regions=[])
    if real:
        sample.eval_parts = labels
    else:
        sample.parts = labels
    sample.instances = instances
    return sample


def _apply_appearance(canvas, labels, appearance):
    fg = labels > 0
    if appearance == "original":
        return canvas
    if appearance == "binary_mask":
        out = np.zeros_like(canvas)
        out[fg] = 255.0
        return out
    out = canvas.copy()
    out[~fg] = 0.0
    if appearance == "grayscale":
        gray = out @ np.array([0.299, 0.587, 0.114])
        out = np.repeat(gray[..., None], 3, axis=2)
    return out


def _photometric_jitter(rng, canvas):
    gain = rng.uniform(0.75, 1.2) * rng.uniform(0.9, 1.1, size=3)
    bias = rng.uniform(-25, 25)
    mean = canvas.mean()
    contrast = rng.uniform(0.75, 1.25)
    out = (canvas - mean) * contrast + mean
    out = out * gain + bias
    out += rng.normal(0, rng.uniform(2, 9), size=out.shape)
    return out


def generate_scene(config: SceneConfig, rng: np.random.Generator) -> AnnotatedSample:
    return _render(config, rng, SYNTHETIC)


def generate_pseudo_real(config: SceneConfig, rng: np.random.Generator) -> AnnotatedSample:
    """Same avatar engine over clutter with jitter; parts kept for evaluation only."""
    return _render(config, rng, REAL)


def sample_rng(seed: int, index: int, domain: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), 0 if domain == SYNTHETIC else 1])


def generate_samples(config: SceneConfig, count: int, domain: str = SYNTHETIC) -> list[AnnotatedSample]:
    gen = generate_scene if domain == SYNTHETIC else generate_pseudo_real
    out = []
    for i in range(count):
        s = gen(config, sample_rng(config.seed, i, domain))
        s.sample_id = f"{domain[0]}{config.seed}_{i:06d}"
        out.append(s)
    return out


# -- dataset I/O -----------------------------------------------------------

PALETTE = [c for i in range(256) for c in ((i * 67) % 256, (i * 151) % 256, (i * 23) % 256)]
PALETTE[:3] = [0, 0, 0]


def save_label_png(labels: np.ndarray, path: str) -> None:
    img = Image.fromarray(labels.astype(np.uint8))
    img = img.convert("P") if img.mode != "P" else img
    img.putpalette(PALETTE)
    img.save(path, optimize=False)


def load_label_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img, dtype=np.uint8)


def sample_to_json(sample: AnnotatedSample) -> dict:
    return {
        "id": sample.sample_id,
        "domain": sample.domain,
        "image_size": list(sample.shape),
        "persons": [
            {"keypoints": p.keypoints.tolist(), "extra": None if p.extra is None else p.extra.tolist()}
            for p in sample.persons
        ],
        "ignore_regions": [list(map(float, r)) for r in sample.ignore_regions],
    }


def generate_dataset(config: SceneConfig, count: int, out_dir: str, domain: str = SYNTHETIC) -> dict:
    """Materialise ``count`` samples under ``out_dir``; returns the manifest."""
    created = not os.path.exists(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
        for sub in ("images", "labels", "annotations"):
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
        gen = generate_scene if domain == SYNTHETIC else generate_pseudo_real
        entries = []
        for i in range(count):
            s = gen(config, sample_rng(config.seed, i, domain))
            s.sample_id = f"{i:06d}"
            rel = {
                "image": f"images/{i:06d}.png",
                "labels": f"labels/{i:06d}.png",
                "annotation": f"annotations/{i:06d}.json",
            }
            Image.fromarray(s.image).save(os.path.join(out_dir, rel["image"]), optimize=False)
            save_label_png(s.labels_for_eval(), os.path.join(out_dir, rel["labels"]))
            with open(os.path.join(out_dir, rel["annotation"]), "w") as f:
                json.dump(sample_to_json(s), f)
            entries.append({"id": s.sample_id, "domain": domain, **rel})
        manifest = {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "domain": domain,
            "config": config.to_dict(),
            "count": count,
            "samples": entries,
        }
        with open(os.path.join(out_dir, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2)
        return manifest
    except OSError:
        if created:
            shutil.rmtree(out_dir, ignore_errors=True)
        else:
            for sub in ("images", "labels", "annotations"):
                shutil.rmtree(os.path.join(out_dir, sub), ignore_errors=True)
        raise


def load_dataset(manifest_path: str) -> list[AnnotatedSample]:
    if os.path.isdir(manifest_path):
        manifest_path = os.path.join(manifest_path, "manifest.json")
    root = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{manifest_path}: not a cdcl dataset manifest")
    samples = []
    for entry in manifest["samples"]:
        with Image.open(os.path.join(root, entry["image"])) as im:
            image = np.array(im.convert("RGB"))
        labels = load_label_png(os.path.join(root, entry["labels"]))
        with open(os.path.join(root, entry["annotation"])) as f:
            ann = json.load(f)
        persons = [PersonAnnotation(p["keypoints"], p.get("extra")) for p in ann["persons"]]
        s = AnnotatedSample(image=image, domain=entry["domain"], persons=persons,
                            ignore_regions=[tuple(r) for r in ann.get("ignore_regions", [])],
                            sample_id=entry["id"])
        if s.domain == SYNTHETIC:
            s.parts = labels
        else:
            s.eval_parts = labels
        samples.append(s)
    return samples


# -- COCO keypoint ingestion -----------------------------------------------

class CocoFormatError(ValueError):
    pass


def ingest_coco_keypoints(json_path: str, image_dir: str) -> list[AnnotatedSample]:
    """Read a COCO person-keypoints file into real-domain samples.

    Keypoint triples with ``v == 0`` become absent, ``v in {1, 2}`` labeled.
    ``iscrowd`` annotations become ignore regions (their ``bbox``) rather
    than persons.
    """
    try:
        with open(json_path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise CocoFormatError(f"{json_path}: malformed JSON ({e})") from None
    for key in ("images", "annotations"):
        if key not in doc:
            raise CocoFormatError(f"{json_path}: missing top-level '{key}'")

    by_image: dict = {img["id"]: [] for img in doc["images"]}
    for k, ann in enumerate(doc["annotations"]):
        if ann.get("image_id") not in by_image:
            raise CocoFormatError(f"{json_path}: annotation #{k} refers to unknown image_id {ann.get('image_id')}")
        by_image[ann["image_id"]].append(ann)

    samples = []
    for img in doc["images"]:
        path = os.path.join(image_dir, img["file_name"])
        if not os.path.exists(path):
            raise CocoFormatError(f"{json_path}: image {img['id']} file not found: {path}")
        with Image.open(path) as im:
            image = np.array(im.convert("RGB"))
        persons, ignore = [], []
        for ann in by_image[img["id"]]:
            if ann.get("iscrowd", 0):
                ignore.append(tuple(float(v) for v in ann["bbox"]))
                continue
            kps = ann.get("keypoints")
            if kps is None or len(kps) != 17 * 3:
                n = 0 if kps is None else len(kps)
                raise CocoFormatError(
                    f"{json_path}: annotation id {ann.get('id')} (image {img['id']}) has {n} keypoint values, expected 51"
                )
            arr = np.asarray(kps, dtype=np.float64).reshape(17, 3)
            arr[:, 2] = np.where(arr[:, 2] > 0, LABELED, ABSENT)
            persons.append(PersonAnnotation(arr))
        samples.append(AnnotatedSample(image=image, domain=REAL, persons=persons, ignore_regions=ignore,
                                       sample_id=str(img["id"])))
    return samples
