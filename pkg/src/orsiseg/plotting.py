"""Figures written next to the CSV/JSON reports (Agg backend, PNG files)."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import METRIC_KEYS  # noqa: E402

_LABELS = {"fwb": "weighted F", "fm_max": "max F", "s_measure": "S", "e_measure": "E (max)", "mae": "MAE"}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the bytes stable across runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def read_train_log(log_path):
    with Path(log_path).open() as fh:
        return list(csv.DictReader(fh))


def plot_loss_curve(log_path, out_path):
    """Total loss per iteration plus the per-epoch mean."""
    rows = read_train_log(log_path)
    if not rows:
        raise ValueError(f"empty training log: {log_path}")
    loss = np.array([float(r["loss"]) for r in rows])
    per_epoch = defaultdict(list)
    for i, r in enumerate(rows):
        per_epoch[int(r["epoch"])].append(i)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.arange(1, len(loss) + 1)
    ax.plot(steps, loss, lw=0.8, alpha=0.6, label="iteration")
    ends = [idx[-1] + 1 for idx in per_epoch.values()]
    means = [loss[idx].mean() for idx in per_epoch.values()]
    ax.plot(ends, means, "o-", ms=3, label="epoch mean")
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_path)


def plot_metric_summary(report: dict, out_path):
    fig, ax = plt.subplots(figsize=(5, 3))
    values = [report[k] for k in METRIC_KEYS]
    bars = ax.bar([_LABELS[k] for k in METRIC_KEYS], values, color="#4878a8")
    for bar, v in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, v + 0.02, f"{v:.3f}", ha="center", fontsize=8)
    ax.set_ylim(0, 1.1)
    ax.set_title(f"{report['n_images']} images")
    fig.tight_layout()
    return _save(fig, out_path)


def plot_prediction_grid(samples, out_path, max_rows=4):
    """``samples``: iterable of (id, image HxWx3, gt HxW, pred HxW) arrays in [0, 1]."""
    samples = list(samples)[:max_rows]
    if not samples:
        raise ValueError("no samples to plot")
    fig, axes = plt.subplots(len(samples), 3, figsize=(6, 2 * len(samples)), squeeze=False)
    for row, (sid, image, gt, pred) in zip(axes, samples):
        for ax, arr, title in zip(row, (image, gt, pred), ("image", "mask", "prediction")):
            ax.imshow(arr, cmap=None if arr.ndim == 3 else "gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            ax.set_title(f"{sid} {title}" if title == "image" else title, fontsize=8)
    fig.tight_layout()
    return _save(fig, out_path)
