"""Split prediction errors into boundary errors and category errors.

A mispredicted, non-ignored pixel is a boundary error when some non-ignored
pixel within Chebyshev distance ``d`` carries a different ground-truth class,
and a category error otherwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import IGNORE_INDEX, ValidationError

SUMMARY_SCHEMA_VERSION = 1
CORRECT, BOUNDARY, CATEGORY, IGNORED = 0, 1, 2, 3
CATEGORY_TINT = (255, 0, 0)
BOUNDARY_TINT = (255, 255, 0)


def _as_array(labels) -> np.ndarray:
    if hasattr(labels, "classes"):
        labels = labels.classes
    if hasattr(labels, "detach"):
        labels = labels.detach().cpu().numpy()
    return np.asarray(labels)


def gt_boundary_mask(labels, d: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Pixels with a different non-ignored class within Chebyshev distance ``d``.

    Works on (H, W) or (N, H, W) grids. Ignored pixels are never in the band.
    """
    if d < 1:
        raise ValidationError(f"band width must be >= 1, got {d}")
    lab = _as_array(labels).astype(np.int64)
    if lab.ndim == 3:
        return np.stack([gt_boundary_mask(x, d, ignore_index) for x in lab])
    valid = lab != ignore_index
    size = 2 * d + 1
    # edge replication only repeats values already inside the window
    # sentinels stay small: scipy's rank filters overflow near the int64 limits
    top = int(lab[valid].max()) + 1 if valid.any() else 1
    hi = ndimage.maximum_filter(np.where(valid, lab, -1), size=size, mode="nearest")
    lo = ndimage.minimum_filter(np.where(valid, lab, top), size=size, mode="nearest")
    return valid & (hi != lo)


def boundary_f_score(pred, gt, d: int = 2, ignore_index: int = IGNORE_INDEX) -> float:
    """Boundary F-measure of one prediction at matching tolerance ``d``.

    Boundary pixels are class-change pixels (band of width 1); a boundary
    pixel matches when the other map has a boundary pixel within distance
    ``d``. Two empty boundary maps score 1.
    """
    pred = _as_array(pred).astype(np.int64)
    gt = _as_array(gt).astype(np.int64)
    ignored = gt == ignore_index
    pred = np.where(ignored, ignore_index, pred)
    pb = gt_boundary_mask(pred, 1, ignore_index)
    gb = gt_boundary_mask(gt, 1, ignore_index)
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    window = np.ones((2 * d + 1, 2 * d + 1), dtype=bool)
    precision = (pb & ndimage.binary_dilation(gb, window)).sum() / pb.sum()
    recall = (gb & ndimage.binary_dilation(pb, window)).sum() / gb.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


@dataclass
class ErrorDecomposition:
    band: int
    num_classes: int
    per_image: List[dict]
    category_confusion: np.ndarray  # (gt class, predicted class) counts of category errors
    boundary_f: float
    error_maps: List[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def totals(self) -> dict:
        keys = ("correct", "boundary_error", "category_error", "ignored", "total")
        return {k: int(sum(c[k] for c in self.per_image)) for k in keys}


def error_map(pred, gt, d: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Per-pixel code: 0 correct, 1 boundary error, 2 category error, 3 ignored."""
    pred = _as_array(pred)
    gt = _as_array(gt)
    band = gt_boundary_mask(gt, d, ignore_index)
    out = np.full(gt.shape, CORRECT, dtype=np.uint8)
    wrong = (pred != gt) & (gt != ignore_index)
    out[wrong & band] = BOUNDARY
    out[wrong & ~band] = CATEGORY
    out[gt == ignore_index] = IGNORED
    return out


def decompose_errors(pred, gt, d: int = 2, num_classes: int = None,
                     ignore_index: int = IGNORE_INDEX) -> ErrorDecomposition:
    """Classify every pixel of (N, H, W) or (H, W) predictions."""
    pred = _as_array(pred)
    gt = _as_array(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if gt.ndim == 2:
        pred, gt = pred[None], gt[None]
    if num_classes is None:
        valid = gt[gt != ignore_index]
        num_classes = int(max(valid.max(initial=0), pred.max(initial=0))) + 1
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    per_image, maps, scores = [], [], []
    for p, g in zip(pred, gt):
        codes = error_map(p, g, d, ignore_index)
        cat = codes == CATEGORY
        np.add.at(confusion, (g[cat].astype(np.int64), p[cat].astype(np.int64)), 1)
        per_image.append({
            "correct": int((codes == CORRECT).sum()),
            "boundary_error": int((codes == BOUNDARY).sum()),
            "category_error": int(cat.sum()),
            "ignored": int((codes == IGNORED).sum()),
            "total": int(codes.size),
        })
        maps.append(codes)
        scores.append(boundary_f_score(p, g, d, ignore_index))
    return ErrorDecomposition(d, num_classes, per_image, confusion, float(np.mean(scores)), maps)


def _to_uint8_hwc(image) -> np.ndarray:
    img = _as_array(image)
    if img.ndim == 3 and img.shape[0] in (1, 3) and img.shape[-1] not in (1, 3):
        img = np.transpose(img, (1, 2, 0))
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    return img


def overlay(image, codes: np.ndarray, strength: float = 0.5) -> np.ndarray:
    img = _to_uint8_hwc(image)
    out = img.copy()
    for code, tint in ((CATEGORY, CATEGORY_TINT), (BOUNDARY, BOUNDARY_TINT)):
        sel = codes == code
        mixed = (1 - strength) * img[sel].astype(np.float64) + strength * np.array(tint, dtype=np.float64)
        out[sel] = np.rint(mixed).astype(np.uint8)
    return out


def summary_dict(decomp: ErrorDecomposition) -> dict:
    return {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "band": decomp.band,
        "distance": "chebyshev",
        "num_classes": decomp.num_classes,
        "totals": decomp.totals,
        "per_image": decomp.per_image,
        "category_confusion": decomp.category_confusion.tolist(),
        "boundary_f": decomp.boundary_f,
    }


def emit_report(decomp: ErrorDecomposition, images: Sequence, out_dir) -> List[Path]:
    """Write one tinted overlay PNG per image and ``summary.json``.

    Category errors are tinted red, boundary errors yellow.
    """
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i, (image, codes) in enumerate(zip(images, decomp.error_maps)):
            path = out / f"overlay_{i:04d}.png"
            Image.fromarray(overlay(image, codes)).save(path)
            written.append(path)
        path = out / "summary.json"
        path.write_text(json.dumps(summary_dict(decomp), indent=2))
        written.append(path)
    except OSError as e:
        raise OSError(f"failed to write diagnosis report under {out}: {e}") from e
    return written
