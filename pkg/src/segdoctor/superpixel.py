"""Superpixel association branch for shallow encoder features.

Every pixel is softly assigned to the 3x3 block of grid cells around the
cell that owns it. Cell centres (coordinates and label vectors) are the
association-weighted means of the pixels claiming them, and each pixel is
rebuilt as the association-weighted mix of its nine cell centres.
Neighbour slot ``j`` holds the cell offset ``(j // 3 - 1, j % 3 - 1)`` in
(row, col) order. Offsets that fall off the grid are clamped to the border
cell, so a border pixel may claim the same cell through several slots; the
scatter/gather below sums those slots, which keeps every row a proper
convex combination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import FeatureMap, LabelMap, ValidationError, one_hot

EPS = 1e-8
NUM_NEIGHBORS = 9


@dataclass(frozen=True)
class SuperpixelGrid:
    height: int
    width: int
    s: int

    def __post_init__(self):
        if self.s < 1 or self.height < 1 or self.width < 1:
            raise ValidationError(f"invalid grid {self.height}x{self.width} with interval {self.s}")

    @property
    def grid_hw(self) -> Tuple[int, int]:
        return math.ceil(self.height / self.s), math.ceil(self.width / self.s)

    @property
    def num_cells(self) -> int:
        gh, gw = self.grid_hw
        return gh * gw

    def cell_of(self, y: int, x: int) -> Tuple[int, int]:
        return y // self.s, x // self.s

    def neighbors_of(self, y: int, x: int) -> list:
        gh, gw = self.grid_hw
        cy, cx = self.cell_of(y, x)
        out = []
        for j in range(NUM_NEIGHBORS):
            ny = min(max(cy + j // 3 - 1, 0), gh - 1)
            nx = min(max(cx + j % 3 - 1, 0), gw - 1)
            out.append((ny, nx))
        return out

    def neighbor_index(self, device=None) -> torch.Tensor:
        """Flat cell index claimed by every pixel through every slot, shape (9, H*W)."""
        gh, gw = self.grid_hw
        cy = torch.arange(self.height, device=device) // self.s
        cx = torch.arange(self.width, device=device) // self.s
        idx = []
        for j in range(NUM_NEIGHBORS):
            ny = (cy + j // 3 - 1).clamp(0, gh - 1)
            nx = (cx + j % 3 - 1).clamp(0, gw - 1)
            idx.append((ny[:, None] * gw + nx[None, :]).reshape(-1))
        return torch.stack(idx)

    def coords(self, dtype=torch.float32, device=None) -> torch.Tensor:
        """Pixel coordinates ``[x, y]`` as a (2, H, W) field."""
        ys, xs = torch.meshgrid(
            torch.arange(self.height, dtype=dtype, device=device),
            torch.arange(self.width, dtype=dtype, device=device),
            indexing="ij",
        )
        return torch.stack([xs, ys])


class SuperpixelHead(nn.Module):
    """Three conv-bn-relu stages, bilinear upsampling and a 9-way projection."""

    def __init__(self, in_channels: int, hidden: int = 64):
        super().__init__()
        if in_channels < 1:
            raise ValidationError(f"in_channels must be >= 1, got {in_channels}")
        layers = []
        c = in_channels
        for _ in range(3):
            layers += [nn.Conv2d(c, hidden, 3, padding=1, bias=False), nn.BatchNorm2d(hidden), nn.ReLU(inplace=True)]
            c = hidden
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv2d(hidden, NUM_NEIGHBORS, 1)

    def forward(self, x: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        x = self.body(x)
        if tuple(x.shape[-2:]) != tuple(size):
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return self.proj(x)


def build_head(shallow_channels: int, hidden: int = 64, seed: Optional[int] = None) -> SuperpixelHead:
    """Construct an association head; a seed makes the initial weights reproducible."""
    if seed is None:
        return SuperpixelHead(shallow_channels, hidden)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SuperpixelHead(shallow_channels, hidden)


def normalize_associations(logits, mode: str = "softmax-9") -> torch.Tensor:
    """Turn (N, 9, H, W) head logits into per-pixel weights summing to one."""
    logits = logits.data if isinstance(logits, FeatureMap) else logits
    if logits.dim() != 4 or logits.shape[1] != NUM_NEIGHBORS:
        raise ValidationError(f"association logits need 9 channels, got shape {tuple(logits.shape)}")
    if mode == "softmax-9":
        return torch.softmax(logits, dim=1)
    if mode == "sigmoid-renorm":
        p = torch.sigmoid(logits)
        return p / p.sum(1, keepdim=True).clamp_min(EPS)
    raise ValidationError(f"unknown normalization mode {mode!r}")


def _cell_centers(assoc, index, num_cells, values, weight):
    """Association-weighted mean of ``values`` for every cell.

    Returns (N, D, S) centres and an (N, S) mask of cells with nonzero weight.
    """
    n, d = values.shape[:2]
    p = assoc.reshape(n, 1, NUM_NEIGHBORS, -1)
    if weight is not None:
        p = p * weight.reshape(n, 1, 1, -1).to(p.dtype)
    flat = index.reshape(-1)
    num = values.new_zeros(n, d, num_cells).index_add(2, flat, (values.reshape(n, d, 1, -1) * p).reshape(n, d, -1))
    den = p.new_zeros(n, num_cells).index_add(1, flat, p.reshape(n, -1))
    alive = den > EPS
    return num / den.clamp_min(EPS).unsqueeze(1), alive


def _mix(assoc, index, centers, alive):
    """Per-pixel association-weighted mix of the nine claimed cell centres."""
    n, d = centers.shape[:2]
    p = assoc.reshape(n, NUM_NEIGHBORS, -1)
    flat = index.reshape(-1)
    live = alive[:, flat].reshape(p.shape).to(p.dtype)
    gathered = centers[:, :, flat].reshape(n, d, NUM_NEIGHBORS, -1)
    out = (gathered * (p * live).unsqueeze(1)).sum(2)
    kept = (p * live).sum(1, keepdim=True)
    dead = (p * (1.0 - live)).sum(1, keepdim=True)
    # weight on cells nobody claims goes back to the pixel's live cells
    out = torch.where(dead > 0, out / kept.clamp_min(EPS), out)
    return out.reshape(n, d, *assoc.shape[-2:])


def reconstruct(
    assoc: torch.Tensor,
    grid: SuperpixelGrid,
    pixel_features: torch.Tensor,
    pixel_coords: Optional[torch.Tensor] = None,
    valid_mask: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Rebuild pixel coordinates and pixel vectors from superpixel centres.

    Args:
        assoc: (N, 9, H, W) normalized associations.
        grid: sampling grid matching (H, W).
        pixel_features: (N, D, H, W) per-pixel vectors, normally one-hot labels.
        pixel_coords: (2, H, W) or (N, 2, H, W) coordinates; defaults to the
            grid's integer ``[x, y]`` field.
        valid_mask: (N, H, W) pixels allowed to shape the feature centres.
            Coordinate centres always use every pixel.

    Returns:
        ``(coords', features')`` with shapes (N, 2, H, W) and (N, D, H, W).
    """
    n, _, h, w = assoc.shape
    if (h, w) != (grid.height, grid.width):
        raise ValidationError(f"associations are {h}x{w} but the grid is {grid.height}x{grid.width}")
    if pixel_features.shape[0] != n or tuple(pixel_features.shape[-2:]) != (h, w):
        raise ValidationError(f"pixel features {tuple(pixel_features.shape)} do not match associations {tuple(assoc.shape)}")
    if pixel_coords is None:
        pixel_coords = grid.coords(assoc.dtype, assoc.device)
    if pixel_coords.dim() == 3:
        pixel_coords = pixel_coords.unsqueeze(0).expand(n, -1, -1, -1)
    index = grid.neighbor_index(assoc.device)

    coord_centers, coord_alive = _cell_centers(assoc, index, grid.num_cells, pixel_coords.to(assoc.dtype), None)
    feat_centers, feat_alive = _cell_centers(assoc, index, grid.num_cells, pixel_features.to(assoc.dtype), valid_mask)
    coords_rec = _mix(assoc, index, coord_centers, coord_alive)
    feats_rec = _mix(assoc, index, feat_centers, feat_alive)
    return coords_rec, feats_rec


@dataclass
class SuperpixelLossResult:
    value: torch.Tensor
    ce_term: torch.Tensor
    compactness_term: torch.Tensor
    reconstructed_coords: torch.Tensor
    reconstructed_features: torch.Tensor


def superpixel_loss(f, f_rec, v, v_rec, m: float, s: int, valid_mask=None) -> SuperpixelLossResult:
    """Label cross-entropy of the reconstruction plus (m / s)-weighted compactness.

    Both terms are averaged over valid pixels.
    """
    n, _, h, w = f.shape
    if valid_mask is None:
        valid_mask = torch.ones(n, h, w, dtype=torch.bool, device=f.device)
    if v.dim() == 3:
        v = v.unsqueeze(0).expand(n, -1, -1, -1)
    mask = valid_mask.to(f_rec.dtype)
    count = mask.sum()
    if count == 0:
        zero = f_rec.sum() * 0.0 + v_rec.sum() * 0.0
        return SuperpixelLossResult(zero, zero, zero, v_rec, f_rec)
    ce = -(f * torch.log(f_rec.clamp_min(EPS))).sum(1)
    dist = torch.linalg.vector_norm(v - v_rec, dim=1)
    ce_term = (ce * mask).sum() / count
    compactness = (dist * mask).sum() / count
    value = ce_term + (m / s) * compactness
    return SuperpixelLossResult(value, ce_term, compactness, v_rec, f_rec)


def superpixel_treatment(
    head: SuperpixelHead,
    shallow,
    labels: LabelMap,
    s: int,
    m: float,
    mode: str = "softmax-9",
) -> SuperpixelLossResult:
    """Run the head on a shallow feature map and score it against full-resolution labels."""
    shallow = shallow.data if isinstance(shallow, FeatureMap) else shallow
    _, h, w = labels.shape
    logits = head(shallow, (h, w))
    assoc = normalize_associations(logits, mode)
    grid = SuperpixelGrid(h, w, s)
    f, valid = one_hot(labels, assoc.dtype)
    v = grid.coords(assoc.dtype, assoc.device)
    v_rec, f_rec = reconstruct(assoc, grid, f, v, valid)
    return superpixel_loss(f, f_rec, v, v_rec, m, s, valid)
