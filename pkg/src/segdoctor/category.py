"""Class-centroid cosine penalty on deep encoder features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .core import ClassCentroids, FeatureMap, LabelMap, ValidationError

EPS = 1e-8


@dataclass
class CategoryLossResult:
    value: torch.Tensor
    per_class: torch.Tensor
    contributing_pixels: int


def _features(x) -> torch.Tensor:
    return x.data if isinstance(x, FeatureMap) else x


def _check_shapes(features: torch.Tensor, labels: LabelMap) -> None:
    n, _, h, w = features.shape
    if tuple(labels.shape) != (n, h, w):
        raise ValidationError(
            f"labels of shape {tuple(labels.shape)} do not match deep features {tuple(features.shape)}; "
            "downsample the labels to the feature resolution first"
        )


def _gather(features: torch.Tensor, labels: LabelMap):
    """Flatten to (P, C) feature rows and (P,) class ids of the valid pixels."""
    rows = features.permute(0, 2, 3, 1).reshape(-1, features.shape[1])
    cls = labels.classes.reshape(-1)
    keep = cls != labels.ignore_index
    return rows[keep], cls[keep].long()


def compute_centroids(deep_features, labels: LabelMap, detach: bool = True) -> ClassCentroids:
    """Mean deep feature of every class present in ``labels``.

    The mean is the closed-form minimiser of the summed squared distance to
    the class members. Centroids are detached by default so gradients flow
    only through the per-pixel features.
    """
    feats = _features(deep_features)
    _check_shapes(feats, labels)
    rows, cls = _gather(feats, labels)
    if rows.shape[0] == 0:
        raise ValidationError("cannot compute centroids: every pixel is ignored")
    k = labels.num_classes
    sums = rows.new_zeros(k, rows.shape[1]).index_add(0, cls, rows)
    counts = torch.bincount(cls, minlength=k)
    present = counts > 0
    centers = sums / counts.clamp_min(1).unsqueeze(1).to(rows.dtype)
    if detach:
        centers = centers.detach()
    return ClassCentroids(centers, present)


def category_loss(deep_features, centroids: ClassCentroids, labels: LabelMap) -> CategoryLossResult:
    """Mean cosine distance between each pixel's feature and its class centre."""
    feats = _features(deep_features)
    _check_shapes(feats, labels)
    if centroids.num_classes != labels.num_classes:
        raise ValidationError(
            f"centroids cover {centroids.num_classes} classes but labels declare {labels.num_classes}"
        )
    rows, cls = _gather(feats, labels)
    k = labels.num_classes
    if rows.shape[0] == 0:
        zero = feats.sum() * 0.0
        return CategoryLossResult(zero, feats.new_zeros(k), 0)
    if not bool(centroids.present[cls].all()):
        raise ValidationError("a labelled class has no centroid; recompute centroids on this batch")

    centers = centroids.centers.to(rows.dtype)[cls]
    cos = (rows * centers).sum(1) / (rows.norm(dim=1).clamp_min(EPS) * centers.norm(dim=1).clamp_min(EPS))
    penalty = 1.0 - cos

    counts = torch.bincount(cls, minlength=k)
    per_class = rows.new_zeros(k).index_add(0, cls, penalty.detach()) / counts.clamp_min(1).to(rows.dtype)
    return CategoryLossResult(penalty.mean(), per_class, int(rows.shape[0]))


class CentroidTracker:
    """Exponential moving average of batch centroids.

    Classes seen for the first time take the batch centre directly. The
    tracker has a single writer, the training loop.
    """

    def __init__(self, num_classes: int, decay: float = 0.9):
        self.num_classes = num_classes
        self.decay = decay
        self.centers: Optional[torch.Tensor] = None
        self.present = torch.zeros(num_classes, dtype=torch.bool)

    def update(self, batch: ClassCentroids) -> ClassCentroids:
        new = batch.centers.detach()
        if self.centers is None:
            self.centers = torch.zeros_like(new)
        seen = batch.present.to(self.present.device)
        blend = (seen & self.present).unsqueeze(1)
        fresh = (seen & ~self.present).unsqueeze(1)
        ema = self.decay * self.centers + (1.0 - self.decay) * new
        self.centers = torch.where(blend, ema, torch.where(fresh, new, self.centers))
        self.present = self.present | seen
        return ClassCentroids(self.centers, self.present.clone())
