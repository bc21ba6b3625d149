"""Shared types, validation contracts and label utilities."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any, Optional, Sequence, Tuple

import torch

IGNORE_INDEX = 255
NORMALIZATION_MODES = ("softmax-9", "sigmoid-renorm")
CENTROID_MODES = ("batch", "ema")


class SegDoctorError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(SegDoctorError, ValueError):
    """An input violates a shape, range or type contract."""


class ConfigError(SegDoctorError, ValueError):
    """A configuration record is malformed or inconsistent."""


class DataError(SegDoctorError):
    """A dataset on disk is missing files or holds invalid masks."""


class NumericError(SegDoctorError, ArithmeticError):
    """A loss component became NaN or infinite."""


@dataclass(frozen=True)
class FeatureMap:
    """An (N, C, H, W) activation map tagged with the layer that produced it."""

    data: torch.Tensor
    layer_tag: str = ""

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ValidationError(
                f"feature map {self.layer_tag!r} must have 4 axes (N, C, H, W), "
                f"got shape {tuple(self.data.shape)}"
            )
        if min(self.data.shape) < 1:
            raise ValidationError(f"feature map {self.layer_tag!r} has an empty axis: {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValidationError(f"feature map {self.layer_tag!r} contains NaN or Inf")

    @property
    def shape(self) -> torch.Size:
        return self.data.shape


@dataclass(frozen=True)
class LabelMap:
    """Integer class grid of shape (N, H, W) with a reserved ignore index."""

    classes: torch.Tensor
    num_classes: int
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.classes.dim() != 3:
            raise ValidationError(f"label map must have shape (N, H, W), got {tuple(self.classes.shape)}")
        if self.classes.dtype.is_floating_point or self.classes.dtype == torch.bool:
            raise ValidationError(f"label map must be integer typed, got {self.classes.dtype}")
        if 0 <= self.ignore_index < self.num_classes:
            raise ValidationError(f"ignore_index {self.ignore_index} collides with a class index")
        bad = (self.classes != self.ignore_index) & ((self.classes < 0) | (self.classes >= self.num_classes))
        if bad.any():
            n, y, x = (int(i) for i in bad.nonzero()[0])
            raise ValidationError(
                f"label {int(self.classes[n, y, x])} at (batch={n}, y={y}, x={x}) "
                f"is outside [0, {self.num_classes}) and is not the ignore index {self.ignore_index}"
            )

    @property
    def shape(self) -> torch.Size:
        return self.classes.shape

    @property
    def valid(self) -> torch.Tensor:
        return self.classes != self.ignore_index


@dataclass(frozen=True)
class ClassCentroids:
    """Per-class centre vectors and the flags of classes seen in the batch."""

    centers: torch.Tensor  # (K, C)
    present: torch.Tensor  # (K,) bool

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]


@dataclass
class TreatmentConfig:
    """Hyperparameters of the treatment losses and the fine-tuning recipe."""

    alpha: float = 1.0
    beta: float = 0.01
    m: float = 0.03
    s: int = 16
    deep_tap: str = "encoder.stage4"
    shallow_taps: Sequence[str] = ("encoder.stage1",)
    normalization_mode: str = "softmax-9"
    centroid_mode: str = "batch"
    ema_decay: float = 0.9
    centroid_grad: bool = False
    head_hidden: int = 64
    lr: float = 0.01
    lr_floor: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    crop_size: Optional[Tuple[int, int]] = None  # None: image size for synthetic data, 512x512 for VOC
    hflip: bool = True
    vflip: bool = True
    seed: int = 0

    def __post_init__(self):
        self.shallow_taps = tuple(self.shallow_taps)
        if self.crop_size is not None:
            self.crop_size = tuple(int(v) for v in self.crop_size)
        for name in ("alpha", "beta", "m", "lr", "lr_floor", "weight_decay", "momentum"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if int(self.s) != self.s or self.s < 1:
            raise ConfigError(f"sampling interval s must be a positive integer, got {self.s}")
        if not self.shallow_taps:
            raise ConfigError("at least one shallow tap is required")
        if self.normalization_mode not in NORMALIZATION_MODES:
            raise ConfigError(f"normalization_mode must be one of {NORMALIZATION_MODES}, got {self.normalization_mode!r}")
        if self.centroid_mode not in CENTROID_MODES:
            raise ConfigError(f"centroid_mode must be one of {CENTROID_MODES}, got {self.centroid_mode!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.batch_size < 1 or self.head_hidden < 1:
            raise ConfigError("batch_size and head_hidden must be positive")
        if self.crop_size is not None and (len(self.crop_size) != 2 or min(self.crop_size) < 1):
            raise ConfigError(f"crop_size must be two positive integers, got {self.crop_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shallow_taps"] = list(self.shallow_taps)
        d["crop_size"] = list(self.crop_size) if self.crop_size is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TreatmentConfig":
        return cls(**checked_keys(cls, d, "treatment"))


def checked_keys(cls, d: Any, where: str) -> dict:
    """Reject anything that is not a mapping of known dataclass field names."""
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed keys are {sorted(known)}")
    return dict(d)


def one_hot(labels: LabelMap, dtype: torch.dtype = torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    """One-hot encode a label map.

    Returns:
        A ``(N, K, H, W)`` tensor and a ``(N, H, W)`` boolean validity mask.
        Ignored pixels get an all-zero vector and ``False`` in the mask.
    """
    valid = labels.valid
    safe = torch.where(valid, labels.classes, torch.zeros_like(labels.classes)).long()
    encoded = torch.nn.functional.one_hot(safe, labels.num_classes).permute(0, 3, 1, 2).to(dtype)
    encoded = encoded * valid.unsqueeze(1).to(dtype)
    return encoded, valid


def nearest_indices(src: int, dst: int) -> torch.Tensor:
    # corner-anchored: output index i reads source index floor(i * src / dst)
    return torch.div(torch.arange(dst) * src, dst, rounding_mode="floor")


def downsample_labels(labels: LabelMap, target_hw: Tuple[int, int]) -> LabelMap:
    """Nearest-neighbour resize of a label map to a coarser grid."""
    th, tw = (int(v) for v in target_hw)
    _, h, w = labels.shape
    if th < 1 or tw < 1:
        raise ValidationError(f"target size must be positive, got {target_hw}")
    if th > h or tw > w:
        raise ValidationError(f"target size {target_hw} exceeds source size {(h, w)}")
    if (th, tw) == (h, w):
        return labels
    rows = nearest_indices(h, th).to(labels.classes.device)
    cols = nearest_indices(w, tw).to(labels.classes.device)
    out = labels.classes[:, rows][:, :, cols]
    return LabelMap(out, labels.num_classes, labels.ignore_index)


def check_finite(name: str, value: Optional[torch.Tensor]) -> None:
    if value is not None and not torch.isfinite(value).all():
        raise NumericError(f"loss component {name!r} is not finite: {value}")
