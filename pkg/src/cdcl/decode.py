"""Test-time decoding: multi-scale part scores, keypoint peaks, PAF limb
scoring and greedy skeleton assembly."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .network import CDCLNet, image_tensor
from .skeleton import SkeletonSpec, get_skeleton
from .targets import grid_to_image, image_to_grid

log = logging.getLogger(__name__)


@dataclass
class DecodeOptions:
    peak_threshold: float = 0.1
    min_limb_score: float = 0.05
    n_samples: int = 10
    scales: tuple = (0.5, 1.0, 1.5)
    skeletons: bool = True

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d


@dataclass
class KeypointCandidate:
    type: int
    position: tuple
    score: float
    id: int


@dataclass
class PersonSkeleton:
    joints: list  # per keypoint type: KeypointCandidate or None
    limbs_used: list = field(default_factory=list)  # (limb index, score)
    total_score: float = 0.0

    def to_dict(self, spec: SkeletonSpec) -> dict:
        return {
            "joints": {
                spec.keypoints[j]: None if c is None else
                {"x": float(c.position[0]), "y": float(c.position[1]), "score": float(c.score), "id": c.id}
                for j, c in enumerate(self.joints)
            },
            "limbs_used": [[int(c), float(s)] for c, s in self.limbs_used],
            "total_score": float(self.total_score),
        }


# -- part scores -----------------------------------------------------------

def _resize(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def part_probabilities(model: CDCLNet, image: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Softmax part scores for one scale, resampled to the image size."""
    x = image_tensor(image)
    H, W = x.shape[-2:]
    size = (max(int(round(H * scale)), 1), max(int(round(W * scale)), 1))
    model.eval()
    with torch.no_grad():
        out = model(_resize(x, size))
        prob = F.softmax(out.B_hat, dim=1)
        prob = _resize(prob, (H, W))
    return prob[0].numpy()


def max_pool_scores(score_maps: Sequence[np.ndarray]) -> np.ndarray:
    if not score_maps:
        raise ValueError("no score maps to pool")
    out = np.array(score_maps[0], copy=True)
    for s in score_maps[1:]:
        np.maximum(out, s, out=out)
    return out


def multiscale_part_scores(model: CDCLNet, image: np.ndarray, scales: Sequence[float]) -> np.ndarray:
    if not scales:
        raise ValueError("scales must be non-empty")
    H, W = np.asarray(image).shape[:2]
    maps = []
    for s in scales:
        if s <= 0:
            raise ValueError(f"scale must be positive, got {s}")
        if min(H * s, W * s) < model.stride:
            log.warning("scale %.3g skipped: %dx%d image shrinks below stride %d", s, H, W, model.stride)
            continue
        maps.append(part_probabilities(model, image, s))
    if not maps:
        raise ValueError("every scale was skipped; image too small for the requested scales")
    return max_pool_scores(maps)


def part_segmentation(scores: np.ndarray) -> np.ndarray:
    """Per-pixel argmax; ``np.argmax`` already resolves ties to the lowest index."""
    scores = np.asarray(scores)
    if not np.all(np.isfinite(scores)):
        raise ValueError("part scores contain non-finite values")
    return np.argmax(scores, axis=0).astype(np.int64)


# -- keypoints -------------------------------------------------------------

def _refine(ch: np.ndarray, y: int, x: int) -> tuple[float, float]:
    """Sub-cell offset from a parabola through the log values of the peak
    and its neighbours (exact for an isolated Gaussian)."""
    h, w = ch.shape
    eps = 1e-12

    def offset(lm, l0, lp):
        denom = lm - 2.0 * l0 + lp
        if denom >= 0:
            return 0.0
        return float(np.clip(0.5 * (lm - lp) / denom, -0.5, 0.5))

    dx = dy = 0.0
    l0 = np.log(max(ch[y, x], eps))
    if 0 < x < w - 1:
        dx = offset(np.log(max(ch[y, x - 1], eps)), l0, np.log(max(ch[y, x + 1], eps)))
    if 0 < y < h - 1:
        dy = offset(np.log(max(ch[y - 1, x], eps)), l0, np.log(max(ch[y + 1, x], eps)))
    return dx, dy


def keypoint_peaks(K_hat: np.ndarray, threshold: float, spec: SkeletonSpec, stride: int = 1,
                   refine: bool = True) -> list[KeypointCandidate]:
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    K_hat = np.asarray(K_hat, dtype=np.float64)
    if K_hat.shape[0] != spec.num_keypoints:
        raise ValueError(f"{K_hat.shape[0]} keypoint channels for a {spec.num_keypoints}-keypoint skeleton")
    cands: list[KeypointCandidate] = []
    next_id = 0
    for j, ch in enumerate(K_hat):
        pad = np.pad(ch, 1, mode="constant", constant_values=-np.inf)
        c = pad[1:-1, 1:-1]
        peak = ((c > pad[:-2, 1:-1]) & (c > pad[2:, 1:-1]) & (c > pad[1:-1, :-2]) & (c > pad[1:-1, 2:])
                & (c > threshold))
        ys, xs = np.nonzero(peak)
        found = []
        for y, x in zip(ys, xs):
            dx, dy = _refine(ch, y, x) if refine else (0.0, 0.0)
            px, py = grid_to_image((x + dx, y + dy), stride)
            found.append((float(min(ch[y, x], 1.0)), (float(px), float(py))))
        found.sort(key=lambda f: -f[0])
        for score, pos in found:
            cands.append(KeypointCandidate(j, pos, score, next_id))
            next_id += 1
    return cands


# -- limbs -----------------------------------------------------------------

def limb_score(P_hat: np.ndarray, a: KeypointCandidate, b: KeypointCandidate, limb: int,
               n_samples: int = 10, stride: int = 1, spec: Optional[SkeletonSpec] = None) -> float:
    """Mean alignment between the predicted field and the a->b direction,
    sampled at ``n_samples`` evenly spaced points (nearest cell)."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if spec is not None and (a.type, b.type) != spec.limbs[limb]:
        raise ValueError(f"candidates of types ({a.type}, {b.type}) do not match limb {spec.limbs[limb]}")
    pa = image_to_grid(a.position, stride)
    pb = image_to_grid(b.position, stride)
    d = pb - pa
    norm = float(np.hypot(d[0], d[1]))
    if norm < 1e-9:
        return 0.0
    u = d / norm
    t = np.linspace(0.0, 1.0, n_samples)
    pts = pa[None, :] + t[:, None] * d[None, :]
    h, w = P_hat.shape[-2:]
    xi = np.clip(np.rint(pts[:, 0]).astype(np.int64), 0, w - 1)
    yi = np.clip(np.rint(pts[:, 1]).astype(np.int64), 0, h - 1)
    vx = P_hat[2 * limb, yi, xi]
    vy = P_hat[2 * limb + 1, yi, xi]
    return float(np.mean(vx * u[0] + vy * u[1]))


def connect_limbs(candidates: Sequence[KeypointCandidate], P_hat: np.ndarray, spec: SkeletonSpec,
                  min_limb_score: float = 0.05, n_samples: int = 10, stride: int = 1) -> list[list[tuple]]:
    """Per limb, greedily accepted ``(id_a, id_b, score)`` pairs."""
    by_type: dict[int, list] = {}
    for c in candidates:
        by_type.setdefault(c.type, []).append(c)
    connections = []
    for c, (ta, tb) in enumerate(spec.limbs):
        scored = []
        for a in by_type.get(ta, ()):
            for b in by_type.get(tb, ()):
                s = limb_score(P_hat, a, b, c, n_samples, stride)
                if s >= min_limb_score:
                    scored.append((s, a.id, b.id))
        scored.sort(key=lambda e: (-e[0], e[1], e[2]))
        used_a, used_b, accepted = set(), set(), []
        for s, ia, ib in scored:
            if ia in used_a or ib in used_b:
                continue
            used_a.add(ia)
            used_b.add(ib)
            accepted.append((ia, ib, s))
        connections.append(accepted)
    return connections


def greedy_assemble(candidates: Sequence[KeypointCandidate], P_hat: np.ndarray, spec: SkeletonSpec,
                    min_limb_score: float = 0.05, n_samples: int = 10, stride: int = 1) -> list[PersonSkeleton]:
    """Link candidates limb by limb, then merge links sharing a candidate.

    A link whose endpoint slot is already held by a different candidate in
    the same skeleton is dropped; two skeletons are merged only if they fill
    disjoint keypoint types.
    """
    by_id = {c.id: c for c in candidates}
    J = spec.num_keypoints
    persons: list[PersonSkeleton] = []
    owner: dict[int, PersonSkeleton] = {}

    for limb, links in enumerate(connect_limbs(candidates, P_hat, spec, min_limb_score, n_samples, stride)):
        ta, tb = spec.limbs[limb]
        for ia, ib, s in links:
            pa, pb = owner.get(ia), owner.get(ib)
            if pa is None and pb is None:
                p = PersonSkeleton([None] * J)
                p.joints[ta], p.joints[tb] = by_id[ia], by_id[ib]
                p.limbs_used.append((limb, s))
                persons.append(p)
                owner[ia] = owner[ib] = p
            elif pa is not None and pb is not None:
                if pa is pb:
                    pa.limbs_used.append((limb, s))
                    continue
                if any(x is not None and y is not None for x, y in zip(pa.joints, pb.joints)):
                    continue
                for j, c in enumerate(pb.joints):
                    if c is not None:
                        pa.joints[j] = c
                        owner[c.id] = pa
                pa.limbs_used += pb.limbs_used + [(limb, s)]
                persons.remove(pb)
            else:
                p, new_id, slot = (pa, ib, tb) if pa is not None else (pb, ia, ta)
                if p.joints[slot] is not None:
                    continue
                p.joints[slot] = by_id[new_id]
                owner[new_id] = p
                p.limbs_used.append((limb, s))
    for p in persons:
        p.total_score = float(sum(s for _, s in p.limbs_used))
    return persons


def decode_pose(K: np.ndarray, P: np.ndarray, spec: SkeletonSpec, stride: int = 1,
                options: Optional[DecodeOptions] = None) -> list[PersonSkeleton]:
    opts = options or DecodeOptions()
    cands = keypoint_peaks(K, opts.peak_threshold, spec, stride)
    return greedy_assemble(cands, P, spec, opts.min_limb_score, opts.n_samples, stride)


def infer(model: CDCLNet, image: np.ndarray, options: Optional[DecodeOptions] = None) -> dict:
    opts = options or DecodeOptions()
    scores = multiscale_part_scores(model, image, opts.scales)
    result = {"labels": part_segmentation(scores), "scores": scores, "skeletons": [], "novel_skeletons": None}
    if not opts.skeletons:
        return result
    model.eval()
    with torch.no_grad():
        out = model(image_tensor(image)).select(0).numpy()
    spec = model.config.skeleton
    result["skeletons"] = decode_pose(out.K_hat, out.P_hat, spec, model.stride, opts)
    if out.K2_hat is not None:
        novel = get_skeleton(model.config.extra_spec)
        result["novel_skeletons"] = decode_pose(out.K2_hat, out.P2_hat, novel, model.stride, opts)
    return result
