"""Independent reference computations used by the tests.

Nothing here imports the code under test; each oracle re-derives its result
from the definition with plain loops.
"""

import math

import numpy as np
import torch


def neighbor_cells(y, x, s, gh, gw):
    cy, cx = y // s, x // s
    return [
        (min(max(cy + dy, 0), gh - 1), min(max(cx + dx, 0), gw - 1))
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
    ]


def brute_reconstruct(p, s, values, weight=None, eps=1e-8):
    """Two-pass superpixel reconstruction by explicit double loops.

    Args:
        p: (9, H, W) association weights of one image.
        s: sampling interval.
        values: (D, H, W) per-pixel vectors (coordinates or one-hot labels).
        weight: optional (H, W) pixel weights for the centre pass.

    Returns:
        (D, H, W) reconstruction.
    """
    p = np.asarray(p, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    _, h, w = p.shape
    d = values.shape[0]
    if weight is None:
        weight = np.ones((h, w))
    gh, gw = math.ceil(h / s), math.ceil(w / s)
    nbrs = {(y, x): neighbor_cells(y, x, s, gh, gw) for y in range(h) for x in range(w)}

    centers, alive = {}, {}
    for a in range(gh):
        for b in range(gw):
            num = np.zeros(d)
            den = 0.0
            for y in range(h):
                for x in range(w):
                    for j, cell in enumerate(nbrs[(y, x)]):
                        if cell == (a, b):
                            num += values[:, y, x] * p[j, y, x] * weight[y, x]
                            den += p[j, y, x] * weight[y, x]
            alive[(a, b)] = den > eps
            centers[(a, b)] = num / den if den > eps else np.zeros(d)

    out = np.zeros((d, h, w))
    for y in range(h):
        for x in range(w):
            acc = np.zeros(d)
            kept = 0.0
            dead = 0.0
            for j, cell in enumerate(nbrs[(y, x)]):
                if alive[cell]:
                    acc += centers[cell] * p[j, y, x]
                    kept += p[j, y, x]
                else:
                    dead += p[j, y, x]
            if dead > 0:
                acc = acc / max(kept, eps)
            out[:, y, x] = acc
    return out


def central_fd_grad(fn, x, h=1e-6):
    """Central finite-difference gradient of scalar ``fn`` at double tensor ``x``."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn(x))
            flat[i] = orig - h
            down = float(fn(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def autograd_grad(fn, x):
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def relative_error(a, b):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def brute_boundary_band(labels, d, ignore=255):
    """In-band mask by scanning every pixel pair."""
    labels = np.asarray(labels)
    h, w = labels.shape
    out = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            c = labels[y, x]
            if c == ignore:
                continue
            for yy in range(h):
                for xx in range(w):
                    if max(abs(yy - y), abs(xx - x)) <= d and labels[yy, xx] != ignore and labels[yy, xx] != c:
                        out[y, x] = True
    return out


def brute_confusion(pred, gt, k, ignore=255):
    cm = np.zeros((k, k), dtype=np.int64)
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if g != ignore:
            cm[g, p] += 1
    return cm


def centroid_objective(rows, center):
    return float(((rows - center) ** 2).sum())
