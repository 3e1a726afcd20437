"""Ground-truth map synthesis at head-output resolution.

All maps live on an output grid with a fixed ``stride``; grid cell ``u``
has its centre at image coordinate ``(u + 0.5) * stride - 0.5``. ``sigma``
and ``limb_width`` are measured in output cells.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .data import SYNTHETIC, AnnotatedSample, PersonAnnotation
from .skeleton import PartTaxonomy, SkeletonSpec

log = logging.getLogger(__name__)

DEFAULT_SIGMA = 2.0
DEFAULT_LIMB_WIDTH = 1.0


def image_to_grid(xy, stride: int):
    return (np.asarray(xy, dtype=np.float64) + 0.5) / stride - 0.5


def grid_to_image(uv, stride: int):
    return (np.asarray(uv, dtype=np.float64) + 0.5) * stride - 0.5


def output_shape(image_shape: Sequence[int], stride: int) -> tuple[int, int]:
    h, w = image_shape[:2]
    return (-(-h // stride), -(-w // stride))


@dataclass
class TargetBundle:
    K: np.ndarray  # [J, h, w]
    P: np.ndarray  # [2C, h, w], x/y interleaved per limb
    B: Optional[np.ndarray]  # [h, w] part indices, None when no part labels
    M: np.ndarray  # [h, w] in {0, 1}
    stride: int = 1
    K2: Optional[np.ndarray] = None
    P2: Optional[np.ndarray] = None


def _grid(shape):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    return xx.astype(np.float64), yy.astype(np.float64)


def keypoint_confidence_maps(persons: Sequence[PersonAnnotation], spec: SkeletonSpec, sigma: float,
                             shape: tuple[int, int], stride: int = 1) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    J = spec.num_keypoints
    out = np.zeros((J,) + tuple(shape), dtype=np.float32)
    xx, yy = _grid(shape)
    for person in persons:
        kps = person.for_count(J)
        for j in range(J):
            x, y, v = kps[j]
            if v <= 0:
                continue
            gx, gy = image_to_grid((x, y), stride)
            g = np.exp(-((xx - gx) ** 2 + (yy - gy) ** 2) / (2.0 * sigma * sigma))
            np.maximum(out[j], g, out=out[j])
    return out


def paf_maps(persons: Sequence[PersonAnnotation], spec: SkeletonSpec, limb_width: float,
             shape: tuple[int, int], stride: int = 1) -> np.ndarray:
    if limb_width <= 0:
        raise ValueError(f"limb_width must be positive, got {limb_width}")
    J, C = spec.num_keypoints, spec.num_limbs
    h, w = shape
    acc = np.zeros((C, 2, h, w), dtype=np.float64)
    count = np.zeros((C, h, w), dtype=np.int32)
    xx, yy = _grid(shape)
    for person in persons:
        kps = person.for_count(J)
        for c, (ia, ib) in enumerate(spec.limbs):
            if kps[ia, 2] <= 0 or kps[ib, 2] <= 0:
                continue
            a = image_to_grid(kps[ia, :2], stride)
            b = image_to_grid(kps[ib, :2], stride)
            d = b - a
            length = float(np.hypot(d[0], d[1]))
            if length < 1e-9:
                log.warning("zero-length limb %s-%s skipped", spec.keypoints[ia], spec.keypoints[ib])
                continue
            ux, uy = d / length
            px, py = xx - a[0], yy - a[1]
            along = px * ux + py * uy
            across = np.abs(px * uy - py * ux)
            inside = (along >= 0) & (along <= length) & (across <= limb_width)
            acc[c, 0][inside] += ux
            acc[c, 1][inside] += uy
            count[c][inside] += 1
    nz = count > 0
    out = np.zeros((C, 2, h, w), dtype=np.float64)
    for k in range(2):
        out[:, k][nz] = acc[:, k][nz] / count[nz]
    return out.reshape(2 * C, h, w).astype(np.float32)


def part_label_maps(part_region: np.ndarray, taxonomy: PartTaxonomy, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resample of an index map onto ``shape``."""
    part_region = np.asarray(part_region)
    if part_region.size and (part_region.min() < 0 or part_region.max() >= taxonomy.num_classes):
        raise ValueError(f"part index out of range for taxonomy {taxonomy.name!r}")
    H, W = part_region.shape
    h, w = shape
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(np.int64), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(np.int64), W - 1)
    return part_region[rows[:, None], cols[None, :]].astype(np.int64)


def visibility_mask(sample: AnnotatedSample, shape: tuple[int, int], stride: int = 1) -> np.ndarray:
    mask = np.ones(shape, dtype=np.float32)
    if sample.domain == SYNTHETIC:
        return mask
    h, w = shape
    cx = grid_to_image(np.arange(w), stride)
    cy = grid_to_image(np.arange(h), stride)
    for x, y, rw, rh in sample.ignore_regions:
        cols = (cx >= x) & (cx < x + rw)
        rows = (cy >= y) & (cy < y + rh)
        mask[np.ix_(rows, cols)] = 0.0
    return mask


def build_targets(sample: AnnotatedSample, spec: SkeletonSpec, taxonomy: PartTaxonomy, stride: int,
                  sigma: float = DEFAULT_SIGMA, limb_width: float = DEFAULT_LIMB_WIDTH,
                  parts: Optional[np.ndarray] = None, extra_spec: Optional[SkeletonSpec] = None) -> TargetBundle:
    """Assemble K, P, B, M for one sample.

    ``parts`` overrides the trainer-visible part map (used when real part
    labels are deliberately unlocked); by default ``sample.parts`` is used.
    """
    shape = output_shape(sample.shape, stride)
    part_src = sample.parts if parts is None else parts
    bundle = TargetBundle(
        K=keypoint_confidence_maps(sample.persons, spec, sigma, shape, stride),
        P=paf_maps(sample.persons, spec, limb_width, shape, stride),
        B=None if part_src is None else part_label_maps(part_src, taxonomy, shape),
        M=visibility_mask(sample, shape, stride),
        stride=stride,
    )
    if extra_spec is not None and all(p.extra is not None for p in sample.persons):
        bundle.K2 = keypoint_confidence_maps(sample.persons, extra_spec, sigma, shape, stride)
        bundle.P2 = paf_maps(sample.persons, extra_spec, limb_width, shape, stride)
    return bundle


def dump_targets(bundle: TargetBundle, out_dir: str) -> dict:
    """Write each map as a grayscale PNG plus an ``index.json`` describing them."""
    os.makedirs(out_dir, exist_ok=True)
    index = {"stride": bundle.stride, "maps": []}

    def save(name, arr, lo, hi, kind):
        img = np.clip((arr - lo) / (hi - lo) * 255.0, 0, 255).round().astype(np.uint8)
        fn = f"{name}.png"
        Image.fromarray(img, mode="L").save(os.path.join(out_dir, fn))
        index["maps"].append({"file": fn, "kind": kind, "min": lo, "max": hi})

    for j, ch in enumerate(bundle.K):
        save(f"K_{j:02d}", ch, 0.0, 1.0, "keypoint")
    for c, ch in enumerate(bundle.P):
        save(f"P_{c // 2:02d}_{'xy'[c % 2]}", ch, -1.0, 1.0, "paf")
    if bundle.B is not None:
        fn = "B.png"
        Image.fromarray(bundle.B.astype(np.uint8), mode="L").save(os.path.join(out_dir, fn))
        index["maps"].append({"file": fn, "kind": "part_index"})
    save("M", bundle.M, 0.0, 1.0, "mask")
    with open(os.path.join(out_dir, "index.json"), "w") as f:
        json.dump(index, f, indent=2)
    return index
