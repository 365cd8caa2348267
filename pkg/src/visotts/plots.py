"""Figure rendering for report paths (non-interactive Agg backend only)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_alignment_heatmap(weights: np.ndarray, path, title: str | None = None) -> Path:
    """Grayscale video-frame x phoneme attention heatmap."""
    weights = np.asarray(weights, dtype=np.float64)
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4.5, 4.0))
    im = ax.imshow(weights, aspect="auto", origin="lower", cmap="gray", interpolation="nearest")
    ax.set_xlabel("phoneme index")
    ax.set_ylabel("video frame")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_loss_curve(log_csv, path) -> Path:
    """Loss and learning-rate curves from a step,lr,loss CSV."""
    steps, lrs, losses = [], [], []
    with open(log_csv, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            lrs.append(float(row["lr"]))
            losses.append(float(row["loss"]))
    path = Path(path)
    fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(6.0, 5.0), sharex=True)
    ax_loss.plot(steps, losses, lw=1.0)
    ax_loss.set_ylabel("L1 loss")
    ax_loss.set_yscale("log")
    ax_lr.plot(steps, lrs, lw=1.0, color="tab:orange")
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_metric_overview(rows, path) -> Path:
    """Per-utterance mel error and alignment accuracy bars for a report."""
    path = Path(path)
    names = [row["utt_id"] for row in rows]
    mel = [row["mel_l1"] for row in rows]
    acc = [row["frame_acc"] if row["frame_acc"] is not None else np.nan for row in rows]
    x = np.arange(len(names))
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(max(6.0, 0.25 * len(names)), 5.0), sharex=True)
    ax1.bar(x, mel, color="tab:blue")
    ax1.set_ylabel("mel L1")
    ax2.bar(x, acc, color="tab:green")
    ax2.set_ylabel("frame accuracy")
    ax2.set_ylim(0.0, 1.05)
    ax2.set_xticks(x)
    ax2.set_xticklabels(names, rotation=90, fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
