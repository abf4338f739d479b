"""Figure rendering for attention maps, ablation summaries and training curves."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
})


def upsample_map(amap: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour blow-up of a (grid, grid) map to (size, size), scaled to [0, 1]."""
    grid = amap.shape[0]
    if size % grid:
        raise ValueError(f"size {size} not a multiple of grid {grid}")
    peak = float(amap.max())
    scaled = amap / peak if peak > 0 else np.zeros_like(amap)
    return np.kron(scaled, np.ones((size // grid, size // grid)))


def _overlay(ax, frame: np.ndarray, heat: np.ndarray, title: str | None = None) -> None:
    ax.imshow(frame, cmap="gray", vmin=0, vmax=255)
    ax.imshow(heat, cmap="inferno", alpha=0.55, vmin=0.0, vmax=1.0)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=7)


def save_heatmap(frame: np.ndarray, amap: np.ndarray, path: str | Path, title: str | None = None) -> np.ndarray:
    """Overlay one attention map on a grayscale frame and write it. Returns the upsampled heat."""
    heat = upsample_map(amap, frame.shape[0])
    fig, ax = plt.subplots(figsize=(2.2, 2.2))
    _overlay(ax, frame, heat, title)
    fig.savefig(path)
    plt.close(fig)
    return heat


def save_contact_sheet(
    frames: Sequence[np.ndarray], maps: Sequence[np.ndarray], labels: Sequence[str], path: str | Path
) -> None:
    n = len(maps)
    if not n or not len(frames) == n == len(labels):
        raise ValueError("contact sheet needs equally many frames, maps and labels")
    cols = min(n, 6)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.7 * rows), squeeze=False)
    for ax in axes.flat[n:]:
        ax.axis("off")
    for ax, frame, amap, label in zip(axes.flat, frames, maps, labels):
        _overlay(ax, frame, upsample_map(amap, frame.shape[0]), label)
    fig.savefig(path)
    plt.close(fig)


def save_ablation_figure(rows: Sequence[Mapping], path: str | Path, title: str = "") -> None:
    """Horizontal bar chart of mean return (with std whiskers), best on top."""
    rows = sorted(rows, key=lambda r: r["mean"])
    labels = [r["label"] for r in rows]
    means = [r["mean"] for r in rows]
    stds = [r["std"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 0.35 * len(rows) + 1.0))
    ax.barh(labels, means, xerr=stds, color="#4c72b0", ecolor="#333333", capsize=2)
    ax.set_xlabel("mean return")
    if title:
        ax.set_title(title)
    fig.savefig(path)
    plt.close(fig)


def save_training_curve(metrics: Sequence[Mapping], path: str | Path) -> None:
    steps = [m["step"] for m in metrics]
    fig, ax = plt.subplots(figsize=(4.5, 2.8))
    ax.plot(steps, [m["loss"] for m in metrics], lw=0.8, label="train")
    evals = [(m["step"], m["eval_loss"]) for m in metrics if "eval_loss" in m]
    if evals:
        ax.plot(*zip(*evals), "o-", ms=3, label="full data")
        ax.legend(frameon=False)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    fig.savefig(path)
    plt.close(fig)
