"""Patch geometry: patchification, complementary mask sampling, positions.

An RGB-D frame is cut into a regular grid of square patches. A mask plan
keeps a random fraction ``p_c`` of color patches and a random fraction
``p_d`` of depth patches, sampled so the depth patches avoid the color
patches whenever the two fractions fit side by side. Positions are
encoded with a fixed 2-D sine/cosine embedding (half the channels encode
the row index, half the column index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


@dataclass(frozen=True)
class PatchGrid:
    """Regular patch grid over an image; ``patch`` must divide both dims."""

    image_h: int
    image_w: int
    patch: int

    def __post_init__(self):
        if self.patch <= 0 or self.image_h % self.patch or self.image_w % self.patch:
            raise ValueError(
                f"patch size {self.patch} must evenly divide image {self.image_h}x{self.image_w}"
            )

    @property
    def rows(self) -> int:
        return self.image_h // self.patch

    @property
    def cols(self) -> int:
        return self.image_w // self.patch

    @property
    def n(self) -> int:
        return self.rows * self.cols


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MaskPlan:
    """Kept color/depth patch indices for one frame.

    ``color_kept`` and ``depth_kept`` are sorted index arrays into the
    grid's row-major patch order. They are disjoint whenever
    ``p_c + p_d <= 1``; past that point depth exhausts the complement of
    the color set first and only then overlaps (overlapping slots belong
    to depth at fusion time).
    """

    grid: PatchGrid
    color_kept: np.ndarray
    depth_kept: np.ndarray
    p_c: float
    p_d: float

    def __post_init__(self):
        n = self.grid.n
        for name, frac, kept in (("color", self.p_c, self.color_kept), ("depth", self.p_d, self.depth_kept)):
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"{name} keep fraction {frac} outside [0, 1]")
            if kept.size != _round_half_up(frac * n):
                raise ValueError(f"{name}_kept has {kept.size} indices, expected {_round_half_up(frac * n)}")
            if kept.size and (kept.min() < 0 or kept.max() >= n):
                raise ValueError(f"{name}_kept indices out of range [0, {n})")
            if not np.all(np.diff(kept) > 0):
                raise ValueError(f"{name}_kept must be sorted and unique")
        if self.p_c + self.p_d <= 1.0 and np.intersect1d(self.color_kept, self.depth_kept).size:
            raise ValueError("color and depth kept sets must be disjoint when the fractions fit")


def sample_mask_plan(rng: np.random.Generator, grid: PatchGrid, p_c: float, p_d: float) -> MaskPlan:
    """Sample a uniform mask plan; deterministic for a given generator state."""
    if not (0.0 <= p_c <= 1.0 and 0.0 <= p_d <= 1.0):
        raise ValueError(f"keep fractions ({p_c}, {p_d}) must lie in [0, 1]")
    n = grid.n
    k_c = _round_half_up(p_c * n)
    k_d = _round_half_up(p_d * n)

    color = rng.permutation(n)[:k_c]
    complement = np.setdiff1d(np.arange(n), color)
    if k_d <= complement.size:
        depth = rng.permutation(complement)[:k_d]
    else:
        # Fractions exceed the grid: take the whole complement, then
        # overlap into the color set for the remainder.
        extra = rng.permutation(color)[: k_d - complement.size]
        depth = np.concatenate([complement, extra])

    return MaskPlan(
        grid=grid,
        color_kept=np.sort(color).astype(np.int64),
        depth_kept=np.sort(depth).astype(np.int64),
        p_c=p_c,
        p_d=p_d,
    )


def patchify(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """[c, h, w] image -> [n, c*patch^2] rows, row i at (i // cols, i % cols).

    Values within a row are channel-major: all of channel 0's patch
    pixels, then channel 1's, and so on.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[1] != grid.image_h or image.shape[2] != grid.image_w:
        raise ShapeError(f"patchify: image shape {image.shape} does not match grid "
                         f"(*, {grid.image_h}, {grid.image_w})")
    c, p = image.shape[0], grid.patch
    blocks = image.reshape(c, grid.rows, p, grid.cols, p)
    return np.ascontiguousarray(blocks.transpose(1, 3, 0, 2, 4).reshape(grid.n, c * p * p))


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    patches = np.asarray(patches)
    p = grid.patch
    if patches.ndim != 2 or patches.shape[0] != grid.n or patches.shape[1] % (p * p):
        raise ShapeError(f"patchify inverse: patch matrix shape {patches.shape} does not match grid n={grid.n}")
    c = patches.shape[1] // (p * p)
    blocks = patches.reshape(grid.rows, grid.cols, c, p, p)
    return np.ascontiguousarray(blocks.transpose(2, 0, 3, 1, 4).reshape(c, grid.image_h, grid.image_w))


def positional_embedding(grid: PatchGrid, dim: int) -> np.ndarray:
    """Fixed 2-D sine/cosine position code, [n, dim], float64.

    Layout: [sin(row), cos(row), sin(col), cos(col)] blocks of ``dim/4``
    channels each, over a geometric frequency ladder with base 10000.
    Deterministic and independent of any seed.
    """
    if dim % 4:
        raise ValueError(f"embedding dim {dim} must be divisible by 4")
    q = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(q) / q))
    r = np.repeat(np.arange(grid.rows), grid.cols).astype(np.float64)
    c = np.tile(np.arange(grid.cols), grid.rows).astype(np.float64)
    out = np.empty((grid.n, dim), dtype=np.float64)
    out[:, 0 * q:1 * q] = np.sin(np.outer(r, omega))
    out[:, 1 * q:2 * q] = np.cos(np.outer(r, omega))
    out[:, 2 * q:3 * q] = np.sin(np.outer(c, omega))
    out[:, 3 * q:4 * q] = np.cos(np.outer(c, omega))
    return out
