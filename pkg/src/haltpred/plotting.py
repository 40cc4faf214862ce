"""Matplotlib figures written next to the JSON reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .attribution import BLUE, NEUTRAL, RED  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 3.6),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _rgb(c):
    return tuple(v / 255 for v in c)


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_training_history(report, path: str | Path) -> Path:
    """Validation balanced mAP and mean training loss per check."""
    steps = [r.step for r in report.history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, [r.val_balanced_map for r in report.history], marker="o", ms=3, color="C0", label="val balanced mAP")
        ax.set_xlabel("optimiser step")
        ax.set_ylabel("balanced mAP")
        ax.set_ylim(0, 1.02)
        if report.history:
            best = report.best
            ax.axvline(best.step, color="0.5", ls="--", lw=0.8)
            ax.annotate("restored", (best.step, best.val_balanced_map), xytext=(4, -12), textcoords="offset points")
        twin = ax.twinx()
        twin.plot(steps, [r.train_loss for r in report.history], color="C1", lw=1, label="train loss")
        twin.set_ylabel("train loss")
        twin.grid(False)
        handles = ax.get_legend_handles_labels()[0] + twin.get_legend_handles_labels()[0]
        ax.legend(handles, [h.get_label() for h in handles], loc="lower right")
        return _save(fig, path)


def plot_precision_recall(scores: Sequence[float], labels: Sequence[int], path: str | Path) -> Path:
    """Precision-recall staircase for the non-terminating class."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels) == 1
    order = np.argsort(-s, kind="stable")
    tp = np.cumsum(y[order])
    precision = tp / np.arange(1, len(s) + 1)
    recall = tp / max(1, y.sum())
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        ax.step(np.r_[0, recall], np.r_[1, precision], where="post", color="C3")
        ax.set_xlabel("recall (non-terminating)")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        return _save(fig, path)


def plot_token_attribution(texts: Sequence[str], phi: Sequence[float], path: str | Path, title: str = "") -> Path:
    """Bar per token; red bars push toward non-termination, blue toward termination."""
    phi = np.asarray(phi, dtype=float)
    colors = [_rgb(RED) if v > 0 else _rgb(BLUE) if v < 0 else _rgb(NEUTRAL) for v in phi]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.38 * len(texts) + 1), 3.2))
        ax.bar(np.arange(len(phi)), phi, color=colors, edgecolor="0.3", linewidth=0.4)
        ax.axhline(0, color="0.2", lw=0.6)
        ax.set_xticks(np.arange(len(texts)), labels=list(texts), fontfamily="monospace")
        ax.set_ylabel("Shapley value (prob. points)")
        if title:
            ax.set_title(title)
        return _save(fig, path)
