"""Datasets: seeded synthetic shapes and VOC-style directories."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from .core import IGNORE_INDEX, DataError, ValidationError

SHAPE_TYPES = ("rectangle", "disk", "triangle")
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")


@dataclass(frozen=True)
class Shape:
    kind: str
    label: int
    params: Tuple[float, ...]
    color: Tuple[float, float, float]


def rasterize(shape: Shape, height: int, width: int) -> np.ndarray:
    """Boolean mask of pixels whose centre lies inside ``shape``."""
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    if shape.kind == "rectangle":
        x0, y0, x1, y1 = shape.params
        return (px >= x0) & (px < x1) & (py >= y0) & (py < y1)
    if shape.kind == "disk":
        cx, cy, r = shape.params
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if shape.kind == "triangle":
        ax, ay, bx, by, cx, cy = shape.params
        d1 = (px - bx) * (ay - by) - (ax - bx) * (py - by)
        d2 = (px - cx) * (by - cy) - (bx - cx) * (py - cy)
        d3 = (px - ax) * (cy - ay) - (cx - ax) * (py - ay)
        neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(neg & pos)
    raise ValidationError(f"unknown shape kind {shape.kind!r}")


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) int64
    background: np.ndarray
    shapes: List[Shape] = field(default_factory=list)


def class_palette(num_classes: int) -> np.ndarray:
    hues = np.linspace(0.0, 1.0, num_classes - 1, endpoint=False) if num_classes > 1 else []
    return np.array([colorsys.hsv_to_rgb(h, 0.65, 0.8) for h in hues], dtype=np.float32).reshape(-1, 3)


def _texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.6, size=3)
    coarse = rng.normal(0.0, 0.08, size=(height // 8 + 2, width // 8 + 2, 3))
    up = np.kron(coarse, np.ones((8, 8, 1)))[:height, :width]
    ys, xs = np.mgrid[0:height, 0:width]
    fx, fy, phase = rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3), rng.uniform(0, 2 * np.pi)
    stripes = 0.05 * np.sin(fx * xs + fy * ys + phase)[..., None]
    fine = rng.normal(0.0, 0.03, size=(height, width, 3))
    return np.clip(base + up + stripes + fine, 0.0, 1.0).astype(np.float32)


def _random_shape(rng, kind, label, color, height, width) -> Shape:
    scale = min(height, width)
    if kind == "rectangle":
        w, h = rng.uniform(0.2, 0.5, size=2) * scale
        x0 = rng.uniform(0, width - w)
        y0 = rng.uniform(0, height - h)
        params = (x0, y0, x0 + w, y0 + h)
    elif kind == "disk":
        r = rng.uniform(0.1, 0.25) * scale
        params = (rng.uniform(r, width - r), rng.uniform(r, height - r), r)
    else:
        cx, cy = rng.uniform(0.2, 0.8) * width, rng.uniform(0.2, 0.8) * height
        r = rng.uniform(0.15, 0.3) * scale
        angles = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.3, 0.3, 3)
        params = tuple(float(v) for a in angles for v in (cx + r * np.cos(a), cy + r * np.sin(a)))
    return Shape(kind, int(label), tuple(float(p) for p in params), tuple(float(c) for c in color))


def render_sample(rng: np.random.Generator, height: int, width: int, num_classes: int,
                  shape_types: Sequence[str] = SHAPE_TYPES, max_shapes: int = 4) -> Sample:
    """Draw one image; the mask and the pixels come from the same geometry."""
    palette = class_palette(num_classes)
    background = _texture(rng, height, width)
    image = background.copy()
    mask = np.zeros((height, width), dtype=np.int64)
    shapes = []
    for _ in range(int(rng.integers(1, max_shapes + 1))):
        label = int(rng.integers(1, num_classes))
        kind = shape_types[int(rng.integers(len(shape_types)))]
        color = np.clip(palette[label - 1] + rng.normal(0.0, 0.06, 3), 0.0, 1.0)
        shape = _random_shape(rng, kind, label, color, height, width)
        inside = rasterize(shape, height, width)
        grain = rng.normal(0.0, 0.04, size=(height, width, 3)).astype(np.float32)
        image[inside] = np.clip(color + grain[inside], 0.0, 1.0)
        mask[inside] = label
        shapes.append(shape)
    return Sample(image, mask, background, shapes)


class SegmentationSet(Dataset):
    """In-memory (image, mask) pairs returned as ``(3, H, W)`` float and ``(H, W)`` long tensors."""

    def __init__(self, samples: List[Sample], num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.samples = samples
        self.num_classes = num_classes
        self.ignore_index = ignore_index

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        s = self.samples[i]
        return torch.from_numpy(s.image).permute(2, 0, 1).contiguous(), torch.from_numpy(s.mask)


def synth_dataset(num_images: int = 200, size: Tuple[int, int] = (64, 64), num_classes: int = 3,
                  shape_types: Sequence[str] = SHAPE_TYPES, seed: int = 0, max_shapes: int = 4) -> SegmentationSet:
    """Seeded images of coloured rectangles, disks and triangles on textured backgrounds."""
    h, w = (size, size) if isinstance(size, int) else tuple(size)
    if num_classes < 2:
        raise ValidationError(f"num_classes must be >= 2, got {num_classes}")
    if h % 16 or w % 16:
        raise ValidationError(f"image size {h}x{w} must be divisible by 16")
    if num_images < 1:
        raise ValidationError("num_images must be positive")
    unknown = set(shape_types) - set(SHAPE_TYPES)
    if unknown or not shape_types:
        raise ValidationError(f"shape types must be a non-empty subset of {SHAPE_TYPES}, got {list(shape_types)}")
    rng = np.random.default_rng(seed)
    samples = [render_sample(rng, h, w, num_classes, tuple(shape_types), max_shapes) for _ in range(num_images)]
    return SegmentationSet(samples, num_classes)


def _find_image(folder: Path, stem: str) -> Optional[Path]:
    for suffix in IMAGE_SUFFIXES:
        p = folder / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


class VOCSegmentation(Dataset):
    """VOC-layout directory: ``JPEGImages/``, ``SegmentationClass/`` and
    ``ImageSets/Segmentation/<split>.txt``.

    Pairs load lazily. Mask value 255 marks ignored pixels.
    """

    def __init__(self, root, split: str = "train", num_classes: int = 21, ignore_index: int = IGNORE_INDEX):
        self.root = Path(root)
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        split_file = self.root / "ImageSets" / "Segmentation" / f"{split}.txt"
        if not split_file.exists():
            raise DataError(f"split list not found: {split_file}")
        stems = [line.strip() for line in split_file.read_text().splitlines() if line.strip()]
        if not stems:
            raise DataError(f"split list is empty: {split_file}")
        problems = []
        self.pairs = []
        for stem in stems:
            img = _find_image(self.root / "JPEGImages", stem)
            mask = self.root / "SegmentationClass" / f"{stem}.png"
            if img is None:
                problems.append(f"{stem}: image missing in JPEGImages/")
            if not mask.exists():
                problems.append(f"{stem}: mask missing in SegmentationClass/")
            if img is not None and mask.exists():
                self.pairs.append((img, mask))
        if problems:
            raise DataError("orphan files in VOC directory:\n  " + "\n  ".join(problems))

    def __len__(self):
        return len(self.pairs)

    def _check_mask(self, mask: np.ndarray, path: Path) -> Optional[str]:
        bad = (mask != self.ignore_index) & (mask >= self.num_classes)
        if bad.any():
            values = sorted(int(v) for v in np.unique(mask[bad]))
            return f"{path.name}: class values {values} outside [0, {self.num_classes})"
        return None

    def load(self, i):
        img_path, mask_path = self.pairs[i]
        image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(mask_path), dtype=np.int64)
        if mask.ndim != 2:
            raise DataError(f"{mask_path.name}: mask must be single-channel index data, got shape {mask.shape}")
        if mask.shape != image.shape[:2]:
            raise DataError(f"{mask_path.name}: mask {mask.shape} does not match image {image.shape[:2]}")
        problem = self._check_mask(mask, mask_path)
        if problem:
            raise DataError(problem)
        return image, mask

    def validate(self) -> None:
        """Scan every pair and raise one error listing all bad files."""
        problems = []
        for i in range(len(self)):
            try:
                self.load(i)
            except DataError as e:
                problems.append(str(e))
        if problems:
            raise DataError("invalid masks:\n  " + "\n  ".join(problems))

    def __getitem__(self, i):
        image, mask = self.load(i)
        return torch.from_numpy(image).permute(2, 0, 1).contiguous(), torch.from_numpy(mask.copy())


def load_voc_dir(path, split: str = "train", num_classes: int = 21) -> VOCSegmentation:
    return VOCSegmentation(path, split, num_classes)


class Augmented(Dataset):
    """Random crop plus horizontal/vertical flips, reproducible per (seed, epoch, index).

    Crops larger than the image pad the image with zeros and the mask with
    the ignore index.
    """

    def __init__(self, base: Dataset, crop_size: Optional[Tuple[int, int]] = None,
                 hflip: bool = True, vflip: bool = True, seed: int = 0):
        self.base = base
        self.crop_size = tuple(crop_size) if crop_size else None
        self.hflip = hflip
        self.vflip = vflip
        self.seed = seed
        self.epoch = 0
        self.ignore_index = getattr(base, "ignore_index", IGNORE_INDEX)
        self.num_classes = base.num_classes

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self):
        return len(self.base)

    def __getitem__(self, i):
        image, mask = self.base[i]
        rng = np.random.default_rng([self.seed, self.epoch, i])
        if self.crop_size is not None:
            image, mask = self._crop(image, mask, rng)
        if self.hflip and rng.random() < 0.5:
            image, mask = image.flip(-1), mask.flip(-1)
        if self.vflip and rng.random() < 0.5:
            image, mask = image.flip(-2), mask.flip(-2)
        return image.contiguous(), mask.contiguous()

    def _crop(self, image, mask, rng):
        ch, cw = self.crop_size
        h, w = mask.shape
        ph, pw = max(ch - h, 0), max(cw - w, 0)
        if ph or pw:
            image = torch.nn.functional.pad(image, (0, pw, 0, ph))
            mask = torch.nn.functional.pad(mask, (0, pw, 0, ph), value=self.ignore_index)
            h, w = mask.shape
        y = int(rng.integers(0, h - ch + 1))
        x = int(rng.integers(0, w - cw + 1))
        return image[:, y:y + ch, x:x + cw], mask[y:y + ch, x:x + cw]
