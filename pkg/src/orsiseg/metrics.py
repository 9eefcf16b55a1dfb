"""Saliency evaluation: weighted F, max F, S-measure, E-measure and MAE.

All functions take ``pred`` (float map in [0, 1]) and ``gt`` (binary map) of
identical 2-D shape and return a Python float. Threshold sweeps binarize with
``pred > t`` for ``t`` in ``{0, 1, ..., 255} / 255``.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import DataError, binarize, read_gray

EPS = np.spacing(1)
BETA2_FMAX = 0.3
BETA2_WEIGHTED = 1.0
S_ALPHA = 0.5
THRESHOLDS = np.arange(256, dtype=np.float64) / 255.0
METRIC_KEYS = ("fwb", "fm_max", "s_measure", "e_measure", "mae")


def _prepare(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.size == 0:
        raise ValueError("empty maps")
    if not np.all(np.isfinite(pred)) or pred.min() < 0 or pred.max() > 1:
        raise ValueError("pred values must lie in [0, 1]")
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("gt must be binary")
    return pred, gt.astype(bool)


def mae(pred, gt) -> float:
    pred, gt = _prepare(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def _threshold_counts(pred, gt):
    """(true positives, predicted positives) for every threshold."""
    all_sorted = np.sort(pred.ravel())
    pos_sorted = np.sort(pred[gt])
    n_fg = all_sorted.size - np.searchsorted(all_sorted, THRESHOLDS, side="right")
    tp = pos_sorted.size - np.searchsorted(pos_sorted, THRESHOLDS, side="right")
    return tp.astype(np.float64), n_fg.astype(np.float64)


def f_measure_curve(pred, gt) -> np.ndarray:
    pred, gt = _prepare(pred, gt)
    n_gt = gt.sum()
    if n_gt == 0:
        return np.zeros_like(THRESHOLDS)
    tp, n_fg = _threshold_counts(pred, gt)
    precision = np.divide(tp, n_fg, out=np.zeros_like(tp), where=n_fg > 0)
    recall = tp / n_gt
    denom = BETA2_FMAX * precision + recall
    num = (1 + BETA2_FMAX) * precision * recall
    return np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)


def f_measure_max(pred, gt) -> float:
    return float(f_measure_curve(pred, gt).max())


def e_measure_curve(pred, gt) -> np.ndarray:
    """Enhanced-alignment score (mean of the enhanced matrix) per threshold."""
    pred, gt = _prepare(pred, gt)
    n = gt.size
    n_gt = gt.sum()
    tp, n_fg = _threshold_counts(pred, gt)
    if n_gt == 0:
        return (n - n_fg) / n
    if n_gt == n:
        return n_fg / n
    fp = n_fg - tp
    fn = n_gt - tp
    tn = n - n_gt - fp
    mu_fm = n_fg / n
    mu_gt = n_gt / n
    score = np.zeros_like(THRESHOLDS)
    for fm_val, gt_val, count in ((1, 1, tp), (1, 0, fp), (0, 1, fn), (0, 0, tn)):
        d_fm = fm_val - mu_fm
        d_gt = gt_val - mu_gt
        align = 2 * d_fm * d_gt / (d_fm**2 + d_gt**2 + EPS)
        score += count * (align + 1) ** 2 / 4
    return score / n


def e_measure(pred, gt) -> float:
    return float(e_measure_curve(pred, gt).max())


def e_measure_mean(pred, gt) -> float:
    return float(e_measure_curve(pred, gt).mean())


# S-measure -----------------------------------------------------------------


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def _object_similarity(values):
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2 * x / (x * x + 1 + sigma + EPS)


def _s_object(pred, gt):
    fg = pred * gt
    bg = (1 - pred) * ~gt
    u = gt.mean()
    return u * _object_similarity(fg[gt]) + (1 - u) * _object_similarity(bg[~gt])


def _ssim(pred, gt):
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    sigma_x = ((pred - x) ** 2).sum() / (n - 1 + EPS)
    sigma_y = ((gt - y) ** 2).sum() / (n - 1 + EPS)
    sigma_xy = ((pred - x) * (gt - y)).sum() / (n - 1 + EPS)
    alpha = 4 * x * y * sigma_xy
    beta = (x * x + y * y) * (sigma_x + sigma_y)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def _centroid(gt):
    h, w = gt.shape
    if not gt.any():
        return _round_half_up(w / 2), _round_half_up(h / 2)
    rows, cols = np.nonzero(gt)
    return _round_half_up(cols.mean()) + 1, _round_half_up(rows.mean()) + 1


def _s_region(pred, gt):
    h, w = gt.shape
    x, y = _centroid(gt)
    g = gt.astype(np.float64)
    parts = [
        (slice(0, y), slice(0, x)),
        (slice(0, y), slice(x, w)),
        (slice(y, h), slice(0, x)),
        (slice(y, h), slice(x, w)),
    ]
    area = h * w
    w1 = x * y / area
    w2 = y * (w - x) / area
    w3 = (h - y) * x / area
    weights = (w1, w2, w3, 1 - w1 - w2 - w3)
    return sum(wt * _ssim(pred[r, c], g[r, c]) for wt, (r, c) in zip(weights, parts))


def s_measure(pred, gt) -> float:
    pred, gt = _prepare(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1 - pred.mean())
    if y == 1:
        return float(pred.mean())
    score = S_ALPHA * _s_object(pred, gt) + (1 - S_ALPHA) * _s_region(pred, gt)
    return float(max(score, 0.0))


# weighted F-measure --------------------------------------------------------


def matlab_gaussian(size=7, sigma=5.0):
    r = (size - 1) / 2
    y, x = np.ogrid[-r:r + 1, -r:r + 1]
    h = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def f_measure_weighted(pred, gt) -> float:
    pred, gt = _prepare(pred, gt)
    if not gt.any():
        return 0.0
    # distance and index of the nearest foreground pixel, for background pixels
    dist, idx = ndimage.distance_transform_edt(~gt, return_indices=True)
    err = np.abs(pred - gt)
    err_t = err.copy()
    bg = ~gt
    err_t[bg] = err[idx[0][bg], idx[1][bg]]
    err_a = ndimage.convolve(err_t, matlab_gaussian(), mode="constant", cval=0.0)
    min_err = np.where(gt & (err_a < err), err_a, err)
    importance = np.where(gt, 1.0, 2 - np.exp(np.log(0.5) / 5 * dist))
    err_w = min_err * importance
    tp_w = gt.sum() - err_w[gt].sum()
    fp_w = err_w[bg].sum()
    recall = 1 - err_w[gt].mean()
    precision = tp_w / (tp_w + fp_w + EPS)
    b2 = BETA2_WEIGHTED
    return float((1 + b2) * recall * precision / (recall + b2 * precision + EPS))


def all_metrics(pred, gt) -> dict:
    return {
        "fwb": f_measure_weighted(pred, gt),
        "fm_max": f_measure_max(pred, gt),
        "s_measure": s_measure(pred, gt),
        "e_measure": e_measure(pred, gt),
        "e_measure_mean": e_measure_mean(pred, gt),
        "mae": mae(pred, gt),
    }


# directory evaluation ------------------------------------------------------


@dataclass
class MetricsReport:
    fwb: float
    fm_max: float
    s_measure: float
    e_measure: float
    mae: float
    n_images: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Evaluation:
    report: MetricsReport
    per_image: list  # dicts: id, metrics..., resized
    dataset: str = ""

    @property
    def e_measure_mean(self) -> float:
        return float(np.mean([r["e_measure_mean"] for r in self.per_image]))

    @property
    def n_resized(self) -> int:
        return sum(int(r["resized"]) for r in self.per_image)


def _resize_gray(arr, size):
    im = Image.fromarray(arr.astype(np.float32), mode="F").resize((size[1], size[0]), Image.BILINEAR)
    return np.clip(np.asarray(im, dtype=np.float64), 0.0, 1.0)


def _eval_pair(key, pred_path, gt_path):
    pred = read_gray(pred_path)
    gt = binarize(read_gray(gt_path))
    resized = pred.shape != gt.shape
    if resized:
        pred = _resize_gray(pred, gt.shape)
    row = {"id": key, **all_metrics(pred, gt), "resized": resized}
    return row


def evaluate_directory(pred_dir, gt_dir, workers: int = 1) -> Evaluation:
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise DataError(f"missing directory: {d}")
    gts = {p.stem: p for p in gt_dir.iterdir() if p.suffix.lower() == ".png"}
    preds = {p.stem: p for p in pred_dir.iterdir() if p.suffix.lower() == ".png"}
    if not gts and not preds:
        raise DataError("no evaluation pairs")
    missing = sorted(gts.keys() ^ preds.keys())
    if missing:
        raise DataError("missing counterpart for: " + ", ".join(missing))
    keys = sorted(gts)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda k: _eval_pair(k, preds[k], gts[k]), keys))
    else:
        rows = [_eval_pair(k, preds[k], gts[k]) for k in keys]
    means = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_KEYS}
    return Evaluation(MetricsReport(**means, n_images=len(rows)), rows, dataset=gt_dir.parent.name)


def write_report(evaluation: Evaluation, out_dir) -> dict:
    """Write report.json, report.csv and per_image.csv; return the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out_dir / "report.json",
        "csv": out_dir / "report.csv",
        "per_image": out_dir / "per_image.csv",
    }
    report = evaluation.report.to_dict()
    paths["json"].write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with paths["csv"].open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", *METRIC_KEYS, "e_measure_mean", "n_images", "n_resized"])
        writer.writerow(
            [evaluation.dataset]
            + [f"{report[k]:.6f}" for k in METRIC_KEYS]
            + [f"{evaluation.e_measure_mean:.6f}", report["n_images"], evaluation.n_resized]
        )
    with paths["per_image"].open("w", newline="") as fh:
        cols = ["id", *METRIC_KEYS, "e_measure_mean", "resized"]
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in evaluation.per_image:
            writer.writerow(
                [row["id"]] + [f"{row[k]:.6f}" for k in cols[1:-1]] + [int(row["resized"])]
            )
    return paths
