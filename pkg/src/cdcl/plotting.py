"""Static PNG figures for reports: ablation bars, sweep heatmap, loss
curves and an inference overlay. Uses the Agg backend only."""

from __future__ import annotations

from collections import OrderedDict
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .skeleton import SkeletonSpec  # noqa: E402

DPI = 110


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def _group(rows: Sequence[dict], key: str, value: str) -> "OrderedDict[str, list]":
    groups: OrderedDict = OrderedDict()
    for r in rows:
        v = r.get(value)
        if v is None or not np.isfinite(float(v)):
            continue
        groups.setdefault(str(r[key]), []).append(float(v))
    return groups


def ablation_bars(rows: Sequence[dict], path: str, key: str = "setting", value: str = "avg",
                  title: Optional[str] = None) -> str:
    """Median bar per setting with the individual repeats as dots."""
    groups = _group(rows, key, value)
    if not groups:
        raise ValueError(f"no rows with a {value!r} column to plot")
    names = list(groups)
    med = [float(np.median(v)) for v in groups.values()]
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(names), 3.4))
    x = np.arange(len(names))
    ax.bar(x, med, width=0.6, color="#7a9cc6", edgecolor="#2f4b6e")
    for i, vals in enumerate(groups.values()):
        jitter = np.linspace(-0.12, 0.12, len(vals)) if len(vals) > 1 else [0.0]
        ax.plot(i + np.asarray(jitter), vals, "o", ms=3.5, color="#1b1b1b")
    for i, m in enumerate(med):
        ax.text(i, m, f"{m:.3f}", ha="center", va="bottom", fontsize=8)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20 if max(len(n) for n in names) > 8 else 0)
    ax.set_ylabel(f"mIOU ({value})")
    ax.set_ylim(0, max(1e-3, max(max(v) for v in groups.values())) * 1.18)
    if title:
        ax.set_title(title)
    ax.spines[["top", "right"]].set_visible(False)
    return _save(fig, path)


def sweep_heatmap(rows: Sequence[dict], path: str, value: str = "avg") -> str:
    betas = sorted({float(r["beta"]) for r in rows})
    gammas = sorted({float(r["gamma"]) for r in rows})
    grid = np.full((len(betas), len(gammas)), np.nan)
    for r in rows:
        grid[betas.index(float(r["beta"])), gammas.index(float(r["gamma"]))] = float(r[value])
    fig, ax = plt.subplots(figsize=(1.5 + 0.9 * len(gammas), 1.2 + 0.8 * len(betas)))
    im = ax.imshow(grid, cmap="viridis", origin="lower", aspect="auto")
    for i in range(len(betas)):
        for j in range(len(gammas)):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center", fontsize=8, color="w")
    ax.set_xticks(range(len(gammas)))
    ax.set_xticklabels([f"{g:g}" for g in gammas])
    ax.set_yticks(range(len(betas)))
    ax.set_yticklabels([f"{b:g}" for b in betas])
    ax.set_xlabel("gamma")
    ax.set_ylabel("beta")
    fig.colorbar(im, ax=ax, label=f"mIOU ({value})")
    return _save(fig, path)


def loss_curves(rows: Sequence[dict], path: str, smooth: int = 10) -> str:
    """Weighted loss terms against step, log scale, with a running mean."""
    if not rows:
        raise ValueError("empty training log")
    steps = np.array([float(r["step"]) for r in rows])
    fig, ax = plt.subplots(figsize=(6, 3.4))
    for key in [k for k in rows[0] if k != "step"]:
        y = np.array([float(r[key]) for r in rows])
        if not np.any(y > 0):
            continue
        if smooth > 1 and len(y) >= smooth:
            y = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
            x = steps[smooth - 1:]
        else:
            x = steps
        ax.plot(x, y, lw=1.6 if key == "total" else 1.0, label=key,
                color="k" if key == "total" else None)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("weighted loss")
    ax.legend(fontsize=7, ncol=2, frameon=False)
    return _save(fig, path)


def label_colors(labels: np.ndarray, n_classes: int) -> np.ndarray:
    cmap = plt.get_cmap("tab20", max(n_classes, 2))
    rgb = cmap(np.arange(max(n_classes, 2)))[:, :3]
    rgb[0] = 0.0
    return rgb[np.clip(labels, 0, len(rgb) - 1)]


def inference_figure(image: np.ndarray, labels: np.ndarray, skeletons, spec: SkeletonSpec,
                     n_classes: int, path: str) -> str:
    """Input with decoded skeletons next to the colour-coded part map."""
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.6))
    axes[0].imshow(image)
    for k, person in enumerate(skeletons):
        color = plt.get_cmap("tab10")(k % 10)
        for a, b in spec.limbs:
            ja, jb = person.joints[a], person.joints[b]
            if ja is not None and jb is not None:
                axes[0].plot([ja.position[0], jb.position[0]], [ja.position[1], jb.position[1]],
                             "-", color=color, lw=1.5)
        pts = np.array([j.position for j in person.joints if j is not None])
        if len(pts):
            axes[0].plot(pts[:, 0], pts[:, 1], "o", ms=2.5, color=color)
    axes[1].imshow(label_colors(labels, n_classes), interpolation="nearest")
    axes[0].set_title("skeletons")
    axes[1].set_title("parts")
    for ax in axes:
        ax.set_axis_off()
    return _save(fig, path)
