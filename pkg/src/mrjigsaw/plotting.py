"""Matplotlib figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_history(history: Sequence[dict], path, title: str = "") -> Path:
    """Loss and validation curves of one training run."""
    with plt.rc_context(STYLE):
        epochs = [h["epoch"] for h in history]
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 2.6))
        ax1.plot(epochs, [h["train_loss"] for h in history], label="train")
        ax1.plot(epochs, [h["val_loss"] for h in history], label="valid")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("loss")
        ax1.legend(frameon=False)
        ax2.plot(epochs, [h["val_acc"] for h in history], label="accuracy")
        if history and "val_auc" in history[0]:
            ax2.plot(epochs, [h["val_auc"] for h in history], label="AUC")
        ax2.set_xlabel("epoch")
        ax2.set_ylim(0, 1.02)
        ax2.legend(frameon=False)
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_mosaic(mosaic: np.ndarray, path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.2))
        ax.imshow(mosaic, cmap="gray", vmin=0, vmax=1)
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_roc(labels, scores, path, title: str = "") -> Path:
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=float)
    thresholds = np.concatenate([[np.inf], np.unique(scores)[::-1]])
    tpr = [(scores[labels] >= t).mean() for t in thresholds]
    fpr = [(scores[~labels] >= t).mean() for t in thresholds]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.2))
        ax.plot(fpr, tpr, drawstyle="steps-post")
        ax.plot([0, 1], [0, 1], ls=":", color="0.6")
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_comparison(rows: Sequence[dict], path, title: str = "") -> Path:
    """Grouped point-and-interval chart, one row per arm, for accuracy and AUC."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(6, 2.2))
        names = [r["arm"] for r in rows]
        for ax, metric in zip(axes, ("accuracy", "auc")):
            pts = np.array([r[metric]["point"] for r in rows])
            lo = pts - np.array([r[metric]["low"] for r in rows])
            hi = np.array([r[metric]["high"] for r in rows]) - pts
            ax.errorbar(pts, np.arange(len(rows)), xerr=[lo, hi], fmt="o", capsize=3)
            ax.set_yticks(np.arange(len(rows)), names)
            ax.set_xlabel(metric)
            ax.set_ylim(-0.6, len(rows) - 0.4)
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def save_overlay(rgb: np.ndarray, path) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path)
    return path
