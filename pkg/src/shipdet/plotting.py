"""Figures written next to the CSV/JSON outputs. Uses the non-interactive Agg backend."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIG_W = 5.0
GOLDEN = (np.sqrt(5) - 1) / 2


def _axes(width: float = FIG_W, height: float | None = None):
    fig, ax = plt.subplots(figsize=(width, height or width * GOLDEN))
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    return fig, ax


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_pr_curve(points, path: str | Path, best=None) -> Path:
    """Precision/recall curve from :class:`OperatingPoint` rows."""
    fig, ax = _axes()
    if points:
        r = [p.recall for p in points]
        p = [p.precision for p in points]
        ax.step(r, p, where="post", color="C0", lw=1.5)
    if best is not None:
        ax.plot([best.recall], [best.precision], "o", color="C3", label=f"best F1 {best.f1:.3f}")
        ax.legend(frameon=False, loc="lower left")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    return _save(fig, path)


def plot_loss_curve(rows: Sequence[dict], path: str | Path) -> Path:
    fig, ax = _axes()
    epochs = [r["epoch"] for r in rows]
    for key, style in (("total", "k-"), ("iou_loss", "C0--"), ("obj_loss", "C1--"), ("cls_loss", "C2--")):
        ax.plot(epochs, [r[key] for r in rows], style, lw=1.2, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_heatmap(image: np.ndarray, heat: np.ndarray, path: str | Path, title: str = "") -> Path:
    """Image with the objectness map overlaid."""
    fig, axes = plt.subplots(1, 2, figsize=(2 * FIG_W * 0.7, FIG_W * 0.7))
    axes[0].imshow(image, cmap="gray")
    axes[1].imshow(image, cmap="gray")
    im = axes[1].imshow(heat, cmap="jet", alpha=0.5, vmin=0, vmax=1)
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        axes[1].set_title(title)
    return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path: str | Path, metrics=("mAP", "F1", "Recall", "Precision")) -> Path:
    """Grouped bars, one group per ablation row."""
    fig, ax = _axes(width=FIG_W * 1.3)
    labels = [r["label"] for r in rows]
    x = np.arange(len(rows))
    width = 0.8 / len(metrics)
    for i, m in enumerate(metrics):
        ax.bar(x + (i - (len(metrics) - 1) / 2) * width, [float(r[m]) for r in rows], width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False, ncol=len(metrics), fontsize="small")
    return _save(fig, path)
