"""Confusion-matrix mIOU, dataset evaluation and the ablation harness."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .skeleton import TaxonomyProjection, project_parts

log = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions."""

    counts: np.ndarray
    ignored_pixels: int = 0

    @classmethod
    def empty(cls, n_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64), 0)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts, self.ignored_pixels + other.ignored_pixels)


def accumulate(conf: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray,
               ignore_mask: Optional[np.ndarray] = None) -> ConfusionMatrix:
    """Add ``(gt, pred)`` pixel pairs where ``ignore_mask`` is 1; count the rest as ignored."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    n = conf.n_classes
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise ValueError(f"{name} label outside [0, {n - 1}]")
    if ignore_mask is None:
        keep = np.ones(gt.shape, dtype=bool)
    else:
        ignore_mask = np.asarray(ignore_mask)
        if ignore_mask.shape != gt.shape:
            raise ValueError("ignore mask shape differs from labels")
        keep = ignore_mask.astype(bool)
    idx = gt[keep].astype(np.int64) * n + pred[keep].astype(np.int64)
    counts = np.bincount(idx, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(conf.counts + counts, conf.ignored_pixels + int((~keep).sum()))


def iou_per_class(conf: ConfusionMatrix) -> np.ndarray:
    """IoU per class, NaN where the class is absent from both prediction and truth."""
    c = conf.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(axis=0) + c.sum(axis=1) - tp
    out = np.full(conf.n_classes, np.nan)
    ok = denom > 0
    out[ok] = tp[ok] / denom[ok]
    return out


def miou(conf: ConfusionMatrix, include_background: bool = True) -> tuple[list, float]:
    ious = iou_per_class(conf)
    pool = ious if include_background else ious[1:]
    defined = pool[~np.isnan(pool)]
    mean = float(defined.mean()) if defined.size else float("nan")
    return ious.tolist(), mean


def results_row(conf: ConfusionMatrix, class_names: Sequence[str], **ident) -> dict:
    ious, mean = miou(conf, include_background=True)
    _, fg = miou(conf, include_background=False)
    row = dict(ident)
    # background goes last, matching the usual Head ... Bkg, Avg table layout
    for name, v in list(zip(class_names, ious))[1:] + [(class_names[0], ious[0])]:
        row[name] = v
    row["avg"] = mean
    row["avg_fg"] = fg
    return row


def evaluate_labels(pairs: Iterable[tuple], projection: TaxonomyProjection) -> ConfusionMatrix:
    """Accumulate ``(pred, gt)`` or ``(pred, gt, ignore_mask)`` tuples after projection."""
    conf = ConfusionMatrix.empty(projection.target.num_classes)
    for item in pairs:
        pred, gt = item[0], item[1]
        mask = item[2] if len(item) > 2 else None
        conf = accumulate(conf, project_parts(pred, projection), project_parts(gt, projection), mask)
    return conf


def evaluate(model, dataset, projection: TaxonomyProjection, decode_options=None, **ident) -> dict:
    """Part-segment every sample, project prediction and truth, return one row."""
    from dataclasses import replace

    from .decode import DecodeOptions, infer

    opts = replace(decode_options or DecodeOptions(), skeletons=False)

    def pairs():
        for s in dataset:
            gt = s.labels_for_eval()
            if gt is None:
                raise ValueError(f"sample {s.sample_id!r} carries no evaluation part labels")
            yield infer(model, s.image, opts)["labels"], gt

    conf = evaluate_labels(pairs(), projection)
    return results_row(conf, projection.target.classes, **ident)


def write_rows(path: str, rows: Sequence[dict]) -> None:
    if not rows:
        return
    keys: list = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in keys})


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6f}"
    return v


def read_rows(path: str) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        conv = {}
        for k, v in r.items():
            try:
                conv[k] = float(v) if k not in ("config_id", "axis", "setting") else v
            except (TypeError, ValueError):
                conv[k] = v
        out.append(conv)
    return out


# -- ablation harness ------------------------------------------------------

ABLATION_AXES = ("configuration", "appearance", "models", "backgrounds")


def _ablation_cells(axis: str, shared) -> list[tuple[str, str, dict]]:
    """``(setting label, configuration, synthetic scene overrides)`` per cell."""
    from .synthgen import APPEARANCES

    if axis == "configuration":
        return [(name, name, {}) for name in ("SYN", "NO_SP", "CDCL")]
    if axis == "appearance":
        return [(mode, "CDCL", {"appearance": mode}) for mode in APPEARANCES]
    if axis == "models":
        return [(str(n), "CDCL", {"model_pool_size": int(n)}) for n in shared.ablation.models]
    if axis == "backgrounds":
        return [(str(n), "CDCL", {"background": "composite", "n_backgrounds": int(n)})
                for n in shared.ablation.backgrounds]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def _repeat_config(shared, repeat: int, scene_overrides: dict):
    """Training seed and training-data seeds move with the repeat; evaluation data stays fixed."""
    from dataclasses import replace

    ds = shared.datasets

    def shift(src, extra=None):
        if src.scene is None:
            if extra:
                raise ValueError("scene overrides need a generated (not manifest) synthetic source")
            return src
        scene = dict(src.scene, seed=int(src.scene.get("seed", 0)) + repeat, **(extra or {}))
        return replace(src, scene=scene)

    datasets = replace(ds, real=shift(ds.real), synthetic=shift(ds.synthetic, scene_overrides))
    return replace(shared, seed=shared.seed + repeat, datasets=datasets)


def ablation_suite(shared, out_dir: Optional[str] = None, axes: Optional[Sequence[str]] = None,
                   repeats: Optional[int] = None) -> dict:
    """Train and evaluate every cell of the requested axes ``repeats`` times.

    Returns ``{axis: rows}``. With ``out_dir``, each axis gets
    ``ablation_<axis>.csv`` (rewritten after every finished cell, so an
    interrupted run keeps what it finished) and ``ablation_<axis>.png``.
    """
    from .plotting import ablation_bars
    from .trainer import run_configuration

    axes = list(axes or shared.ablation.axes)
    repeats = int(repeats or shared.ablation.repeats)
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    cells = {axis: _ablation_cells(axis, shared) for axis in axes}  # validate before any training
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    report = {}
    for axis in axes:
        rows = []
        for setting, configuration, overrides in cells[axis]:
            for r in range(repeats):
                cfg = _repeat_config(shared, r, overrides)
                cell_dir = os.path.join(out_dir, axis, f"{setting}_r{r}") if out_dir else None
                _, row = run_configuration(configuration, cfg, cell_dir)
                rows.append({"axis": axis, "setting": setting, "repeat": r, **row})
                log.info("ablation %s=%s repeat %d: avg %.4f", axis, setting, r, row["avg"])
                if out_dir:
                    write_rows(os.path.join(out_dir, f"ablation_{axis}.csv"), rows)
        if out_dir:
            ablation_bars(rows, os.path.join(out_dir, f"ablation_{axis}.png"), title=axis)
        report[axis] = rows
    return report


def median_by(rows: Sequence[dict], key: str = "setting", value: str = "avg") -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(float(r[value]))
    return {k: float(np.median(v)) for k, v in groups.items()}
