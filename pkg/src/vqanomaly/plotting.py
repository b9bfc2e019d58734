"""Figures: ROC curve, per-clip score timelines and saliency heatmaps.

Heatmaps use matplotlib's ``GnBu_r`` colormap: zero error is dark blue and
larger errors turn light green.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset import denormalize  # noqa: E402

HEATMAP_CMAP = "GnBu_r"


def plot_roc(fpr, tpr, auc: float, path: str | Path, title: str = "Frame-level ROC") -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr, lw=1.5, label=f"AUC = {100 * auc:.1f}")
    ax.plot([0, 1], [0, 1], ls="--", c="grey", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_timeline(frames, scores, flags, path: str | Path, title: str = "") -> Path:
    """Normalized score over time with ground-truth anomalous frames shaded."""
    frames = np.asarray(frames)
    fig, ax = plt.subplots(figsize=(7, 2.5))
    if flags is not None:
        flags = np.asarray(flags)
        ax.fill_between(frames, 0, 1, where=flags.astype(bool), color="tab:red", alpha=0.2,
                        step="mid", label="anomalous")
    ax.plot(frames, scores, lw=1.2, c="tab:blue", label="score")
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("frame")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_heatmap(target: np.ndarray, predicted: np.ndarray, saliency: np.ndarray, path: str | Path,
                 vmax: float | None = None) -> Path:
    """Three panels: observed frame, prediction (clamped to [-1, 1]) and saliency.
    Frames are H x W x C in [-1, 1]."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    axes[0].imshow(denormalize(target))
    axes[0].set_title("observed", fontsize=9)
    axes[1].imshow(denormalize(np.clip(predicted, -1, 1)))
    axes[1].set_title("predicted", fontsize=9)
    im = axes[2].imshow(saliency, cmap=HEATMAP_CMAP, vmin=0, vmax=vmax)
    axes[2].set_title("squared error", fontsize=9)
    fig.colorbar(im, ax=axes[2], fraction=0.046, pad=0.04)
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
