"""Patch anchor grids, extraction with DC bookkeeping, and reprojection.

Anchors are the top-left corners of side*side patches lying fully inside
the image.  The regular grid steps by ``spacing`` with the final anchor
clamped to the last valid position, so every pixel is covered.  The
jittered grid perturbs each anchor independently and adds a per-iteration
global shift; the combined offset is clamped to +-floor((side - spacing)/2)
and the boundary anchors of each axis stay pinned, which keeps consecutive
patch starts within ``side`` of each other and therefore guarantees full
coverage for every seed while leaving the anchor count equal to the
regular grid's.

Randomness comes from a counter-based Philox stream keyed by
(seed, iteration), so grids are reproducible independently of thread
count or call order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .errors import DataError

__all__ = [
    "SampleGrid",
    "PatchBatch",
    "jitter_rng",
    "regular_grid",
    "jittered_grid",
    "extract",
    "reproject",
    "coverage_counts",
]


@dataclass
class SampleGrid:
    positions: np.ndarray          # (n, 2) int64 anchors (row, col)
    image_dims: tuple[int, int]
    patch_side: int
    spacing: int
    mode: Literal["regular", "jittered"]
    offsets: np.ndarray | None = None       # applied perturbations, (n, 2)
    global_shift: tuple[int, int] = (0, 0)  # drawn shift before clamping

    @property
    def n_patches(self) -> int:
        return self.positions.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.patch_side * self.patch_side

    def validate(self) -> None:
        H, W = self.image_dims
        side = self.patch_side
        pos = self.positions
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise DataError("positions must be an (n, 2) array")
        if pos.size and (pos.min() < 0 or
                         pos[:, 0].max() > H - side or
                         pos[:, 1].max() > W - side):
            raise DataError("anchor outside the valid patch range")
        if coverage_counts(self).min() < 1:
            raise DataError("grid does not cover every pixel")


def _patch_side(patch_dim: int) -> int:
    side = math.isqrt(patch_dim)
    if side * side != patch_dim:
        raise DataError(f"patch_dim {patch_dim} is not a perfect square")
    return side


def _axis_anchors(extent: int, side: int, spacing: int) -> np.ndarray:
    if extent < side:
        raise DataError(f"image extent {extent} smaller than patch side {side}")
    last = extent - side
    anchors = list(range(0, last + 1, spacing))
    if anchors[-1] != last:
        anchors.append(last)
    return np.array(anchors, dtype=np.int64)


def regular_grid(H: int, W: int, patch_dim: int, spacing: int) -> SampleGrid:
    """Anchors every ``spacing`` pixels, final row/col clamped to the last
    valid anchor so coverage is complete."""
    side = _patch_side(patch_dim)
    if not (1 <= spacing <= side):
        raise DataError(f"spacing must lie in [1, {side}], got {spacing}")
    rows = _axis_anchors(H, side, spacing)
    cols = _axis_anchors(W, side, spacing)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    positions = np.stack([rr.ravel(), cc.ravel()], axis=1)
    return SampleGrid(positions, (H, W), side, spacing, "regular")


def jitter_rng(seed: int, iteration: int) -> np.random.Generator:
    """Counter-based deterministic stream for one sampling round."""
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), iteration]))


def jittered_grid(H: int, W: int, patch_dim: int, spacing: int,
                  rng: np.random.Generator) -> SampleGrid:
    """Regular anchors perturbed by a global shift plus independent
    per-anchor jitter, clamped so coverage holds for every draw."""
    base = regular_grid(H, W, patch_dim, spacing)
    side = base.patch_side
    half = (side - spacing) // 2
    if half == 0:
        return replace(base, mode="jittered",
                       offsets=np.zeros_like(base.positions))
    shift = rng.integers(0, spacing, size=2)
    # fold the shift into the coverage-safe band around each anchor
    effective = shift % (2 * half + 1) - half
    jitter = rng.integers(-half, half + 1, size=base.positions.shape)
    offsets = np.clip(effective[None, :] + jitter, -half, half)

    rows, cols = base.positions[:, 0], base.positions[:, 1]
    last_r, last_c = H - side, W - side
    offsets[(rows == 0) | (rows == last_r), 0] = 0
    offsets[(cols == 0) | (cols == last_c), 1] = 0

    positions = base.positions + offsets
    np.clip(positions[:, 0], 0, last_r, out=positions[:, 0])
    np.clip(positions[:, 1], 0, last_c, out=positions[:, 1])
    return SampleGrid(positions, (H, W), side, spacing, "jittered",
                      offsets=offsets, global_shift=(int(shift[0]), int(shift[1])))


@dataclass
class PatchBatch:
    """DC-removed patches with their means and anchors.

    ``patches + dc + residual`` reproduces the source windows bit-exactly;
    ``residual`` holds the sub-ulp rounding of the mean removal (zero for
    almost every pixel) and is dropped once patches are replaced by
    estimates.
    """

    patches: np.ndarray   # (n, P)
    dc: np.ndarray        # (n,)
    anchors: np.ndarray   # (n, 2)
    patch_side: int
    image_dims: tuple[int, int]
    residual: np.ndarray | None = None


def _row_mean(rows: np.ndarray) -> np.ndarray:
    """Pairwise-fold row mean: exact for constant rows when the row length
    is a power of two (the usual square patch sizes)."""
    acc = rows.copy()
    while acc.shape[1] > 1:
        w = acc.shape[1]
        carry = acc[:, -1].copy() if w % 2 else None
        half = (w // 2) * 2
        acc = acc[:, : half // 2] + acc[:, half // 2: half]
        if carry is not None:
            acc[:, -1] += carry
    return acc[:, 0] / rows.shape[1]


def extract(image: np.ndarray, grid: SampleGrid) -> PatchBatch:
    """Read patches row-major at each anchor and split off the mean."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != grid.image_dims:
        raise DataError(f"image shape {image.shape} does not match grid dims "
                        f"{grid.image_dims}")
    side = grid.patch_side
    windows = np.lib.stride_tricks.sliding_window_view(image, (side, side))
    wins = windows[grid.positions[:, 0], grid.positions[:, 1]]
    wins = wins.reshape(grid.n_patches, side * side)
    dc = _row_mean(wins)
    stored = wins - dc[:, None]
    # recon differs from the source only by sub-ulp rounding, so the
    # correction below is computed exactly (no further error)
    residual = wins - (stored + dc[:, None])
    return PatchBatch(stored, dc, grid.positions.copy(), side,
                      grid.image_dims, residual)


def _flat_indices(anchors: np.ndarray, side: int, W: int) -> np.ndarray:
    offs = (np.arange(side)[:, None] * W + np.arange(side)[None, :]).ravel()
    return (anchors[:, 0] * W + anchors[:, 1])[:, None] + offs[None, :]


def coverage_counts(grid: SampleGrid) -> np.ndarray:
    """Per-pixel number of covering patches."""
    H, W = grid.image_dims
    idx = _flat_indices(grid.positions, grid.patch_side, W).ravel()
    return np.bincount(idx, minlength=H * W).reshape(H, W)


def reproject(batch: PatchBatch, H: int, W: int) -> np.ndarray:
    """Average the overlapping patches (DC added back) into an image.

    Coverage counts come from the batch's own anchors.  Where every
    contribution agrees the common value is returned verbatim, so averaging
    identical patches is exact.
    """
    if (H, W) != batch.image_dims:
        raise DataError(f"target dims {(H, W)} do not match batch dims "
                        f"{batch.image_dims}")
    idx = _flat_indices(batch.anchors, batch.patch_side, W).ravel()
    vals = batch.patches + batch.dc[:, None]
    if batch.residual is not None:
        vals = vals + batch.residual
    vals = vals.ravel()
    counts = np.bincount(idx, minlength=H * W)
    if counts.min() < 1:
        raise DataError("reprojection target has uncovered pixels")
    sums = np.bincount(idx, weights=vals, minlength=H * W)
    lo = np.full(H * W, np.inf)
    hi = np.full(H * W, -np.inf)
    np.minimum.at(lo, idx, vals)
    np.maximum.at(hi, idx, vals)
    out = np.where(lo == hi, lo, sums / counts)
    return out.reshape(H, W)
