"""Annotated sample containers shared by the generator, targets and trainer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SYNTHETIC = "synthetic"
REAL = "real"

ABSENT = 0
LABELED = 1


@dataclass
class PersonAnnotation:
    """One person's keypoints as an ``[J, 3]`` array of ``(x, y, visibility)``.

    Coordinates are image pixels with pixel centres on integers. ``extra``
    optionally holds the same person under a second (novel) skeleton.
    """

    keypoints: np.ndarray
    extra: Optional[np.ndarray] = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        if self.extra is not None:
            self.extra = np.asarray(self.extra, dtype=np.float64).reshape(-1, 3)

    def labeled(self, which: str = "keypoints") -> np.ndarray:
        kp = getattr(self, which)
        return kp[:, 2] > 0

    def for_count(self, j: int) -> np.ndarray:
        """The keypoint array matching a skeleton with ``j`` keypoints."""
        if len(self.keypoints) == j:
            return self.keypoints
        if self.extra is not None and len(self.extra) == j:
            return self.extra
        raise ValueError(f"person has no keypoint set with {j} entries")


@dataclass
class AnnotatedSample:
    image: np.ndarray
    domain: str
    persons: list = field(default_factory=list)
    parts: Optional[np.ndarray] = None
    ignore_regions: list = field(default_factory=list)
    # Part labels held back from training; used only by evaluation (and by
    # the CDCL_REAL configuration, which is allowed to see real part labels).
    eval_parts: Optional[np.ndarray] = None
    sample_id: str = ""
    # per-pixel person index (-1 = none), available for generated scenes
    instances: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def labels_for_eval(self) -> Optional[np.ndarray]:
        return self.eval_parts if self.eval_parts is not None else self.parts
