"""Soft labels for poster patches.

Every patch needs a label even though patches straddle class territories.
Two strategies share one geometric frame, the class grid upsampled to the
poster so each pixel belongs to a class cell:

* fixed: count classes in a patch's pixel window, one-hot the majority
  (ties split evenly among the tied classes);
* learned: pool a trainable (rows, cols, n) label tensor over the window
  through the same nearest-neighbor upsampling, then L1-normalize.  The
  pooling is differentiable so the tensor trains alongside the poster.
"""

from __future__ import annotations

import numpy as np
import torch

from .geometry import ExtractionSpec
from .ordering import ClassOrder

__all__ = [
    "upsample_class_grid",
    "fixed_label",
    "fixed_patch_labels",
    "learned_label",
    "patch_cell_weights",
    "learned_patch_labels",
    "project_labels",
    "init_label_tensor",
]


def _axis_cell_map(length: int, cells: int) -> np.ndarray:
    # Nearest-neighbor downmap: pixel k -> cell floor(k * cells / length).
    return (np.arange(length) * cells) // length


def upsample_class_grid(order: ClassOrder, d_h: int, d_w: int) -> np.ndarray:
    """Nearest-neighbor upsample of the class grid to poster size.

    Pixel (r, c) maps to grid cell (floor(r * rows / d_h),
    floor(c * cols / d_w)).
    """
    if d_h < order.rows or d_w < order.cols:
        raise ValueError("poster dimensions smaller than the class grid")
    row_map = _axis_cell_map(d_h, order.rows)
    col_map = _axis_cell_map(d_w, order.cols)
    return order.grid[np.ix_(row_map, col_map)]


def fixed_label(
    pixel_map: np.ndarray,
    position: tuple[int, int],
    patch_h: int,
    patch_w: int,
    n: int,
) -> np.ndarray:
    """Majority-class label of the window, ties split as 1/k over the tied set."""
    r, c = position
    d_h, d_w = pixel_map.shape
    if not (0 <= r <= d_h - patch_h and 0 <= c <= d_w - patch_w):
        raise ValueError(f"window at {position} exceeds the {d_h}x{d_w} map")
    window = pixel_map[r : r + patch_h, c : c + patch_w]
    counts = np.bincount(window.ravel(), minlength=n)
    top = counts.max()
    tied = counts == top
    label = np.zeros(n, dtype=np.float64)
    label[tied] = 1.0 / tied.sum()
    return label


def fixed_patch_labels(pixel_map: np.ndarray, spec: ExtractionSpec, n: int) -> np.ndarray:
    """Fixed labels for every patch position, shape (p, n)."""
    return np.stack(
        [fixed_label(pixel_map, pos, spec.patch_h, spec.patch_w, n) for pos in spec.positions]
    )


def learned_label(
    Y: torch.Tensor,
    d_h: int,
    d_w: int,
    position: tuple[int, int],
    patch_h: int,
    patch_w: int,
) -> torch.Tensor:
    """Pooled label of one window through the upsampled label tensor.

    Conceptually upsamples Y (rows, cols, n) to (d_h, d_w, n) by nearest
    neighbor, averages the window spatially and L1-normalizes.  Fractional
    cell coverage is exact: cells are weighted by the pixels they
    contribute.  Differentiable with respect to Y; an all-zero window
    yields the uniform distribution.
    """
    rows, cols, n = Y.shape
    r, c = position
    row_map = torch.from_numpy(_axis_cell_map(d_h, rows)[r : r + patch_h])
    col_map = torch.from_numpy(_axis_cell_map(d_w, cols)[c : c + patch_w])
    window = Y[row_map][:, col_map]  # (patch_h, patch_w, n)
    pooled = window.mean(dim=(0, 1))
    return _l1_normalize(pooled.unsqueeze(0)).squeeze(0)


def patch_cell_weights(spec: ExtractionSpec, rows: int, cols: int) -> np.ndarray:
    """Fraction of each patch window covered by each class cell, (p, rows*cols).

    Pooling the upsampled label tensor over a window equals this weight
    matrix applied to the flattened cells, which is how the training loop
    resolves all patch labels in one product.
    """
    row_map = _axis_cell_map(spec.poster_h, rows)
    col_map = _axis_cell_map(spec.poster_w, cols)
    area = spec.patch_h * spec.patch_w
    weights = np.zeros((spec.n_patches, rows * cols), dtype=np.float64)
    for k, (r, c) in enumerate(spec.positions):
        row_counts = np.bincount(row_map[r : r + spec.patch_h], minlength=rows)
        col_counts = np.bincount(col_map[c : c + spec.patch_w], minlength=cols)
        weights[k] = np.outer(row_counts, col_counts).ravel() / area
    return weights


def _l1_normalize(v: torch.Tensor) -> torch.Tensor:
    # Rows with zero mass fall back to the uniform distribution; the safe
    # denominator keeps the masked branch free of NaNs in the graph.
    n = v.shape[-1]
    totals = v.sum(dim=-1, keepdim=True)
    safe = torch.where(totals > 0, totals, torch.ones_like(totals))
    uniform = torch.full_like(v, 1.0 / n)
    return torch.where(totals > 0, v / safe, uniform)


def learned_patch_labels(Y: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Resolve all patch labels from the label tensor at once, (p, n).

    ``weights`` comes from patch_cell_weights for the active geometry.
    """
    rows, cols, n = Y.shape
    pooled = weights @ Y.reshape(rows * cols, n)
    return _l1_normalize(pooled)


def project_labels(Y: torch.Tensor) -> torch.Tensor:
    """Clip negative label-tensor entries to zero (applied after each update)."""
    return torch.clamp(Y, min=0)


def init_label_tensor(order: ClassOrder, n: int) -> np.ndarray:
    """One-hot label tensor from the class grid, shape (rows, cols, n).

    With this initialization, learned labels coincide with fixed labels on
    grid-aligned non-overlapping patches.
    """
    if n != order.n:
        raise ValueError(f"label width {n} does not match {order.n} classes")
    Y = np.zeros((order.rows, order.cols, n), dtype=np.float64)
    for i in range(order.rows):
        for j in range(order.cols):
            Y[i, j, order.grid[i, j]] = 1.0
    return Y
