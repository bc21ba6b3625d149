"""Confusion-matrix IoU metrics."""

from __future__ import annotations

import numpy as np

from .core import IGNORE_INDEX


def confusion_matrix(pred, gt, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Counts indexed by (ground-truth class, predicted class); ignored pixels are dropped."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    keep = gt != ignore_index
    idx = num_classes * gt[keep] + pred[keep]
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """TP / (TP + FP + FN); NaN for classes absent from the ground truth."""
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(1)
    union = gt_count + cm.sum(0) - tp
    iou = np.full(len(tp), np.nan)
    present = gt_count > 0
    iou[present] = tp[present] / union[present]
    return iou


def mean_iou(cm: np.ndarray) -> float:
    iou = iou_per_class(cm)
    if np.isnan(iou).all():
        return float("nan")
    return float(np.nanmean(iou))
