"""Figures written alongside reports: prediction overlays, loss curves and
similarity-pyramid panels. Uses the non-interactive Agg backend."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PRED_COLOR = "lime"
GT_COLOR = "red"
LINK_COLOR = "yellow"

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, out: Path) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    plt.close(fig)
    return out


def plot_overlay(image: np.ndarray, pred: np.ndarray | None, gt: np.ndarray | None, out: Path,
                 title: str = "", marker_size: float = 12) -> Path:
    """Predictions in green, ground truth in red, yellow segments joining each pair.

    ``pred`` and ``gt`` are (K, 2) arrays of (x, y) in the image's pixel frame.
    """
    with plt.rc_context(STYLE):
        h, w = image.shape[:2]
        fig, ax = plt.subplots(figsize=(5, 5 * h / w))
        ax.imshow(image, cmap="gray", vmin=0, vmax=1 if image.max() <= 1 else 255)
        if pred is not None and gt is not None:
            for (px, py), (gx, gy) in zip(pred, gt):
                ax.plot([px, gx], [py, gy], color=LINK_COLOR, lw=1)
        if gt is not None:
            ax.scatter(gt[:, 0], gt[:, 1], s=marker_size, c=GT_COLOR, label="ground truth", zorder=3)
        if pred is not None:
            ax.scatter(pred[:, 0], pred[:, 1], s=marker_size, c=PRED_COLOR, label="prediction", zorder=4)
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        return _save(fig, out)


def plot_loss_curve(steps: Sequence[float], series: dict[str, Sequence[float]], out: Path,
                    xlabel: str = "step", title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        for name, values in series.items():
            ax.plot(steps[:len(values)], values, lw=1, label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        if len(series) > 1:
            ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, out)


def plot_similarity_pyramid(image: np.ndarray, levels: dict[int, np.ndarray], fused: np.ndarray, out: Path,
                            gt_xy: tuple[float, float] | None = None, title: str = "") -> Path:
    """Query image, each level's clipped similarity map and the fused map, side by side."""
    keys = sorted(levels, reverse=True)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(keys) + 2, figsize=(2 * (len(keys) + 2), 2.2))
        axes[0].imshow(image, cmap="gray")
        axes[0].set_title("query")
        n = image.shape[0]
        for ax, lvl in zip(axes[1:], keys):
            ax.imshow(np.clip(levels[lvl], 0, 1), cmap="viridis", vmin=0, vmax=1, extent=(0, n, n, 0))
            ax.set_title(f"level {lvl}")
        axes[-1].imshow(fused, cmap="viridis")
        axes[-1].set_title("fused")
        if gt_xy is not None:
            for ax in axes:
                ax.add_patch(plt.Circle(gt_xy, radius=max(2, n / 40), fill=False, color=GT_COLOR, lw=1))
        for ax in axes:
            ax.set_axis_off()
        if title:
            fig.suptitle(title)
        return _save(fig, out)


def plot_sdr_bars(reports: dict[str, dict], out: Path, title: str = "") -> Path:
    """Grouped SDR bars for several evaluation reports (``EvalReport.to_dict()`` payloads)."""
    names = list(reports)
    radii = list(next(iter(reports.values()))["sdr"]) if reports else []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        width = 0.8 / max(len(names), 1)
        xs = np.arange(len(radii))
        for i, name in enumerate(names):
            ax.bar(xs + i * width, [reports[name]["sdr"][r] for r in radii], width,
                   label=f"{name} (MRE {reports[name]['mre_mm']:.2f} mm)")
        ax.set_xticks(xs + width * (len(names) - 1) / 2)
        ax.set_xticklabels([f"{r} mm" for r in radii])
        ax.set_ylabel("SDR (%)")
        ax.set_ylim(0, 105)
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, out)
