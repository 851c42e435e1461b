"""Poster geometry: pixel budgets, patch grids, and the patch <-> poster adjoint.

The poster is a single trainable image that holds the whole distilled
dataset.  A fixed grid of (possibly overlapping) patch positions turns it
into a synthetic dataset; gradients flow back by overlap-add at shared
pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

__all__ = [
    "DatasetMeta",
    "Poster",
    "ExtractionSpec",
    "DistillBudget",
    "pixel_budget",
    "poster_dims",
    "extraction_spec",
    "extract_patches",
    "accumulate_patch_gradients",
    "init_poster",
]


@dataclass(frozen=True)
class DatasetMeta:
    """Shape and labeling facts of the original dataset."""

    n_classes: int
    image_h: int
    image_w: int
    channels: int = 3
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.image_h < 1 or self.image_w < 1:
            raise ValueError("image dimensions must be positive")
        if self.channels < 1:
            raise ValueError("channels must be positive")
        names = self.class_names or tuple(
            f"class_{i:03d}" for i in range(self.n_classes)
        )
        if len(names) != self.n_classes or len(set(names)) != self.n_classes:
            raise ValueError(
                f"need {self.n_classes} unique class names, got {len(names)}"
            )
        object.__setattr__(self, "class_names", tuple(names))


@dataclass(frozen=True)
class Poster:
    """A single shared image of shape (height, width, channels)."""

    pixels: torch.Tensor

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise ValueError(f"poster must be HxWxC, got shape {tuple(self.pixels.shape)}")
        if not torch.isfinite(self.pixels).all():
            raise ValueError("poster contains non-finite pixels")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class ExtractionSpec:
    """Patch size plus the integer top-left offsets of every patch.

    Positions are enumerated row-major over the patch grid; consumers must
    not assume any other order.
    """

    poster_h: int
    poster_w: int
    patch_h: int
    patch_w: int
    grid_rows: int
    grid_cols: int
    positions: tuple[tuple[int, int], ...] = field(repr=False)

    def __post_init__(self):
        if len(self.positions) != self.grid_rows * self.grid_cols:
            raise ValueError("positions do not match grid dimensions")
        for r, c in self.positions:
            if not (0 <= r <= self.poster_h - self.patch_h):
                raise ValueError(f"row offset {r} out of range")
            if not (0 <= c <= self.poster_w - self.patch_w):
                raise ValueError(f"col offset {c} out of range")

    @property
    def n_patches(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass(frozen=True)
class DistillBudget:
    """Total pixel allowance implied by an images-per-class ratio."""

    ipc: float
    total_pixel_budget: int

    def __post_init__(self):
        if self.ipc <= 0:
            raise ValueError("ipc must be positive")
        if self.total_pixel_budget < 1:
            raise ValueError("pixel budget must be positive")


def pixel_budget(ipc: float, meta: DatasetMeta) -> DistillBudget:
    """Budget of floor(ipc * n_classes * image pixels) poster pixels."""
    total = math.floor(ipc * meta.n_classes * meta.image_h * meta.image_w)
    return DistillBudget(ipc=ipc, total_pixel_budget=total)


def poster_dims(
    meta: DatasetMeta, ipc: float, class_grid: tuple[int, int]
) -> tuple[int, int]:
    """Largest poster (height, width) that fits the pixel budget.

    The aspect ratio follows the class grid (rows, cols) so that each
    class's territory stays approximately square:
    height = floor(sqrt(budget * rows / cols)), width = floor(budget / height).
    """
    rows, cols = class_grid
    if rows * cols != meta.n_classes:
        raise ValueError(
            f"class grid {rows}x{cols} does not cover {meta.n_classes} classes"
        )
    budget = pixel_budget(ipc, meta).total_pixel_budget
    d_h = math.floor(math.sqrt(budget * rows / cols))
    if d_h < 1:
        raise ValueError("pixel budget too small for any poster")
    d_w = math.floor(budget / d_h)
    if d_h < meta.image_h or d_w < meta.image_w:
        raise ValueError(
            f"budget of {budget} pixels yields a {d_h}x{d_w} poster, smaller "
            f"than one {meta.image_h}x{meta.image_w} patch"
        )
    return d_h, d_w


def _round_half_away(x: float) -> int:
    # Python's round() is banker's rounding; the grid needs half-away-from-zero.
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def _axis_offsets(length: int, patch: int, count: int) -> list[int]:
    if count == 1:
        return [0]
    span = length - patch
    return [_round_half_away(i * span / (count - 1)) for i in range(count)]


def extraction_spec(
    d_h: int,
    d_w: int,
    patch_h: int,
    patch_w: int,
    grid_rows: int,
    grid_cols: int,
) -> ExtractionSpec:
    """Build the row-major patch grid spanning the poster corner to corner.

    Offsets along each axis are the rounded even subdivision of the free
    span, so the first patch starts at 0 and the last ends flush with the
    poster edge.  A grid denser than the axis allows (duplicate offsets on
    an axis longer than one patch) is rejected.
    """
    if d_h < patch_h or d_w < patch_w:
        raise ValueError("poster smaller than one patch")
    if grid_rows < 1 or grid_cols < 1:
        raise ValueError("grid dimensions must be positive")
    row_offsets = _axis_offsets(d_h, patch_h, grid_rows)
    col_offsets = _axis_offsets(d_w, patch_w, grid_cols)
    if grid_rows > 1 and d_h > patch_h and len(set(row_offsets)) != grid_rows:
        raise ValueError(
            f"{grid_rows} patch rows collapse to duplicate offsets on height {d_h}"
        )
    if grid_cols > 1 and d_w > patch_w and len(set(col_offsets)) != grid_cols:
        raise ValueError(
            f"{grid_cols} patch cols collapse to duplicate offsets on width {d_w}"
        )
    positions = tuple((r, c) for r in row_offsets for c in col_offsets)
    return ExtractionSpec(
        poster_h=d_h,
        poster_w=d_w,
        patch_h=patch_h,
        patch_w=patch_w,
        grid_rows=grid_rows,
        grid_cols=grid_cols,
        positions=positions,
    )


def extract_patches(pixels: torch.Tensor, spec: ExtractionSpec) -> torch.Tensor:
    """Stack the poster windows at every grid position, (p, ph, pw, c).

    Pure slicing, so autograd routes patch gradients back to the shared
    pixels by overlap-add (the adjoint implemented explicitly in
    accumulate_patch_gradients).
    """
    if pixels.shape[0] != spec.poster_h or pixels.shape[1] != spec.poster_w:
        raise ValueError(
            f"poster shape {tuple(pixels.shape)} does not match spec "
            f"{spec.poster_h}x{spec.poster_w}"
        )
    ph, pw = spec.patch_h, spec.patch_w
    return torch.stack([pixels[r : r + ph, c : c + pw] for r, c in spec.positions])


def accumulate_patch_gradients(
    patch_grads: torch.Tensor, spec: ExtractionSpec
) -> torch.Tensor:
    """Overlap-add per-patch gradients back onto the poster canvas.

    This is the adjoint of extract_patches: each output pixel receives the
    sum of gradients from every patch that covers it.
    """
    p, ph, pw = patch_grads.shape[0], patch_grads.shape[1], patch_grads.shape[2]
    if p != spec.n_patches or ph != spec.patch_h or pw != spec.patch_w:
        raise ValueError("patch gradient shape does not match spec")
    out = patch_grads.new_zeros((spec.poster_h, spec.poster_w) + patch_grads.shape[3:])
    for k, (r, c) in enumerate(spec.positions):
        out[r : r + ph, c : c + pw] += patch_grads[k]
    return out


def init_poster(
    d_h: int,
    d_w: int,
    channels: int,
    seed: int,
    dtype: torch.dtype = torch.float32,
) -> Poster:
    """Standard Gaussian poster, deterministic per seed."""
    if d_h < 1 or d_w < 1 or channels < 1:
        raise ValueError("poster dimensions must be positive")
    gen = torch.Generator().manual_seed(seed)
    pixels = torch.randn((d_h, d_w, channels), generator=gen, dtype=dtype)
    return Poster(pixels=pixels)
