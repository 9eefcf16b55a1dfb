"""Deep-supervised weighted BCE + weighted IoU objective."""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F

LEVEL_WEIGHTS = tuple(1.0 / 2 ** (i - 1) for i in range(1, 6))
IOU_EPS = 1.0


class PredictionSet(NamedTuple):
    """Logit maps P1..P5 (P1 from the finest decoder level, P5 from DASPP)."""

    p1: torch.Tensor
    p2: torch.Tensor
    p3: torch.Tensor
    p4: torch.Tensor
    p5: torch.Tensor


class LossOutput(NamedTuple):
    total: torch.Tensor
    per_level: torch.Tensor  # (5, 2): columns bce, iou


def _check_binary(gt):
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must be binary {0, 1}")


def _check_shapes(p, gt, w=None):
    if p.shape != gt.shape or (w is not None and w.shape != gt.shape):
        shapes = [tuple(t.shape) for t in (p, gt, w) if t is not None]
        raise ValueError(f"shape mismatch: {shapes}")


def pixel_weights(gt, window=31, gain=5.0):
    """1 + gain * |local box mean of gt - gt|; the box mean ignores padding."""
    _check_binary(gt)
    local = F.avg_pool2d(gt, window, stride=1, padding=window // 2, count_include_pad=False)
    return 1.0 + gain * torch.abs(local - gt)


def _reduce(per_sample, reduction):
    if reduction == "none":
        return per_sample
    if reduction == "mean":
        return per_sample.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def weighted_bce(p, gt, w, reduction="mean"):
    _check_shapes(p, gt, w)
    bce = F.binary_cross_entropy_with_logits(p, gt, reduction="none")
    per_sample = (w * bce).sum(dim=(1, 2, 3)) / w.sum(dim=(1, 2, 3))
    return _reduce(per_sample, reduction)


def weighted_iou(p, gt, w, reduction="mean"):
    _check_shapes(p, gt, w)
    s = torch.sigmoid(p)
    inter = (w * s * gt).sum(dim=(1, 2, 3))
    union = (w * (s + gt - s * gt)).sum(dim=(1, 2, 3))
    per_sample = 1.0 - (inter + IOU_EPS) / (union + IOU_EPS)
    return _reduce(per_sample, reduction)


def total_loss(preds, gt, reduction="mean") -> LossOutput:
    preds = tuple(preds)
    if len(preds) != 5:
        raise ValueError(f"expected 5 prediction maps, got {len(preds)}")
    w = pixel_weights(gt)
    rows = []
    total = 0.0
    for weight, p in zip(LEVEL_WEIGHTS, preds):
        if p.shape[-2:] != gt.shape[-2:]:
            raise ValueError(
                f"prediction size {tuple(p.shape[-2:])} differs from ground truth {tuple(gt.shape[-2:])}"
            )
        bce = weighted_bce(p, gt, w, reduction)
        iou = weighted_iou(p, gt, w, reduction)
        total = total + weight * (bce + iou)
        rows.append(torch.stack([bce, iou], dim=-1))
    return LossOutput(total, torch.stack(rows, dim=0))
