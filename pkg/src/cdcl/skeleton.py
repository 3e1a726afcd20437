"""Keypoint skeletons, body-part taxonomies and taxonomy projections."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

COCO_KEYPOINTS = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

# The 19-pair COCO keypoint skeleton, 0-indexed, in the order of the COCO
# person category definition:
#   [16,14],[14,12],[17,15],[15,13],[12,13],[6,12],[7,13],[6,7],[6,8],[7,9],
#   [8,10],[9,11],[2,3],[1,2],[1,3],[2,4],[3,5],[4,6],[5,7]   (1-indexed)
COCO_LIMBS = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12),
    (5, 11), (6, 12), (5, 6), (5, 7), (6, 8),
    (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
    (1, 3), (2, 4), (3, 5), (4, 6),
)

NOVEL_EXTRA_KEYPOINTS = (
    "neck",
    "left_palm", "left_thumb", "left_index", "left_pinky",
    "right_palm", "right_thumb", "right_index", "right_pinky",
    "left_heel", "left_toe",
    "right_heel", "right_toe",
)

# Spanning tree over the 30 novel keypoints; names resolved at build time.
_NOVEL_TREE = (
    ("neck", "nose"), ("nose", "left_eye"), ("nose", "right_eye"),
    ("left_eye", "left_ear"), ("right_eye", "right_ear"),
    ("neck", "left_shoulder"), ("left_shoulder", "left_elbow"), ("left_elbow", "left_wrist"),
    ("neck", "right_shoulder"), ("right_shoulder", "right_elbow"), ("right_elbow", "right_wrist"),
    ("neck", "left_hip"), ("left_hip", "left_knee"), ("left_knee", "left_ankle"),
    ("neck", "right_hip"), ("right_hip", "right_knee"), ("right_knee", "right_ankle"),
    ("left_wrist", "left_palm"), ("left_palm", "left_thumb"),
    ("left_palm", "left_index"), ("left_palm", "left_pinky"),
    ("right_wrist", "right_palm"), ("right_palm", "right_thumb"),
    ("right_palm", "right_index"), ("right_palm", "right_pinky"),
    ("left_ankle", "left_heel"), ("left_ankle", "left_toe"),
    ("right_ankle", "right_heel"), ("right_ankle", "right_toe"),
)

PART_CLASSES_14 = (
    "background",
    "head",
    "torso",
    "left_upper_arm",
    "right_upper_arm",
    "left_lower_arm",
    "right_lower_arm",
    "left_hand",
    "right_hand",
    "left_upper_leg",
    "right_upper_leg",
    "left_lower_leg",
    "right_lower_leg",
    "left_foot",
    "right_foot",
)

PART_CLASSES_6 = ("background", "head", "torso", "u-arms", "l-arms", "u-legs", "l-legs")

# 14-part index -> 6-part index. Hands fold into lower arms, feet into lower
# legs, left/right merge.
_MAP_14_TO_6 = (0, 1, 2, 3, 3, 4, 4, 4, 4, 5, 5, 6, 6, 6, 6)


@dataclass(frozen=True)
class SkeletonSpec:
    name: str
    keypoints: tuple[str, ...]
    limbs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "keypoints", tuple(self.keypoints))
        object.__setattr__(self, "limbs", tuple((int(a), int(b)) for a, b in self.limbs))
        if len(set(self.keypoints)) != len(self.keypoints):
            raise ValueError(f"skeleton {self.name!r}: duplicate keypoint names")
        if not self.limbs:
            raise ValueError(f"skeleton {self.name!r}: needs at least one limb")
        n = len(self.keypoints)
        for a, b in self.limbs:
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"skeleton {self.name!r}: limb ({a}, {b}) out of range for {n} keypoints")
            if a == b:
                raise ValueError(f"skeleton {self.name!r}: limb ({a}, {b}) is a self loop")
        if len(set(self.limbs)) != len(self.limbs):
            raise ValueError(f"skeleton {self.name!r}: duplicate limbs")

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoints)

    @property
    def num_limbs(self) -> int:
        return len(self.limbs)

    def index(self, name: str) -> int:
        return self.keypoints.index(name)

    def to_dict(self) -> dict:
        return {"name": self.name, "keypoints": list(self.keypoints), "limbs": [list(l) for l in self.limbs]}

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonSpec":
        return cls(d["name"], tuple(d["keypoints"]), tuple(tuple(l) for l in d["limbs"]))


@dataclass(frozen=True)
class PartTaxonomy:
    name: str
    classes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.classes or self.classes[0] != "background":
            raise ValueError(f"taxonomy {self.name!r}: class 0 must be 'background'")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"taxonomy {self.name!r}: duplicate class names")

    @property
    def num_classes(self) -> int:
        """Foreground classes plus background."""
        return len(self.classes)

    def to_dict(self) -> dict:
        return {"name": self.name, "classes": list(self.classes)}

    @classmethod
    def from_dict(cls, d: dict) -> "PartTaxonomy":
        return cls(d["name"], tuple(d["classes"]))


@dataclass(frozen=True)
class TaxonomyProjection:
    source: PartTaxonomy
    target: PartTaxonomy
    mapping: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "mapping", tuple(int(m) for m in self.mapping))
        if len(self.mapping) != self.source.num_classes:
            raise ValueError(
                f"projection {self.source.name}->{self.target.name}: mapping has {len(self.mapping)} "
                f"entries, source has {self.source.num_classes} classes"
            )
        if self.mapping[0] != 0:
            raise ValueError("projection must map background to background")
        if any(not 0 <= m < self.target.num_classes for m in self.mapping):
            raise ValueError("projection maps outside the target taxonomy")

    @property
    def lut(self) -> np.ndarray:
        return np.asarray(self.mapping, dtype=np.int64)

    def to_dict(self) -> dict:
        # classes are the target's; source and target are resolved by name
        return {
            "name": f"{self.source.name}->{self.target.name}",
            "classes": list(self.target.classes),
            "mapping": list(self.mapping),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaxonomyProjection":
        src, dst = d["name"].split("->")
        target = get_taxonomy(dst)
        if list(target.classes) != list(d["classes"]):
            raise ValueError(f"projection {d['name']!r}: classes disagree with registered {dst!r}")
        return cls(get_taxonomy(src), target, tuple(d["mapping"]))


def standard_skeleton() -> SkeletonSpec:
    return SkeletonSpec("coco17", COCO_KEYPOINTS, COCO_LIMBS)


def novel_skeleton() -> SkeletonSpec:
    """30 keypoints (COCO-17, neck, hands, feet) joined by a 29-edge tree."""
    names = COCO_KEYPOINTS + NOVEL_EXTRA_KEYPOINTS
    limbs = tuple((names.index(a), names.index(b)) for a, b in _NOVEL_TREE)
    return SkeletonSpec("novel30", names, limbs)


def part_taxonomy_14() -> PartTaxonomy:
    return PartTaxonomy("parts14", PART_CLASSES_14)


def part_taxonomy_6() -> PartTaxonomy:
    return PartTaxonomy("parts6", PART_CLASSES_6)


def get_taxonomy(name: str) -> PartTaxonomy:
    try:
        return _TAXONOMIES[name]()
    except KeyError:
        raise KeyError(f"unknown part taxonomy {name!r}") from None


def get_skeleton(name: str) -> SkeletonSpec:
    try:
        return _SKELETONS[name]()
    except KeyError:
        raise KeyError(f"unknown skeleton {name!r}") from None


def identity_projection(taxonomy: PartTaxonomy) -> TaxonomyProjection:
    return TaxonomyProjection(taxonomy, taxonomy, tuple(range(taxonomy.num_classes)))


def projection_14_to_6() -> TaxonomyProjection:
    return TaxonomyProjection(part_taxonomy_14(), part_taxonomy_6(), _MAP_14_TO_6)


_TAXONOMIES = {"parts14": part_taxonomy_14, "parts6": part_taxonomy_6}
_SKELETONS = {"coco17": standard_skeleton, "novel30": novel_skeleton}


def get_projection(name: str) -> TaxonomyProjection:
    """Resolve ``"parts14->parts6"`` style names; ``"parts14"`` alone means identity."""
    if "->" not in name:
        return identity_projection(get_taxonomy(name))
    if name == "parts14->parts6":
        return projection_14_to_6()
    src, dst = name.split("->")
    if src == dst:
        return identity_projection(get_taxonomy(src))
    raise KeyError(f"unknown projection {name!r}")


def project_parts(labels: np.ndarray, projection: TaxonomyProjection) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= projection.source.num_classes):
        bad = labels[(labels < 0) | (labels >= projection.source.num_classes)]
        raise ValueError(
            f"label value {int(bad.flat[0])} outside source taxonomy "
            f"{projection.source.name!r} ({projection.source.num_classes} classes)"
        )
    return projection.lut[labels].astype(labels.dtype, copy=False)


def is_spanning_tree(spec: SkeletonSpec) -> bool:
    n = spec.num_keypoints
    if spec.num_limbs != n - 1:
        return False
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in spec.limbs:
        ra, rb = find(a), find(b)
        if ra == rb:
            return False
        parent[ra] = rb
    return True


def dump_registry(path, specs: Sequence[SkeletonSpec] = (), taxonomies: Sequence[PartTaxonomy] = (),
                  projections: Sequence[TaxonomyProjection] = ()) -> None:
    doc = {
        "skeletons": [s.to_dict() for s in specs],
        "taxonomies": [t.to_dict() for t in taxonomies],
        "projections": [p.to_dict() for p in projections],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
