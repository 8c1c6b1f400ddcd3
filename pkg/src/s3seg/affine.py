"""Random affine maps, inverse-warp sampling grids, and label warping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SENTINEL = -1
_SNAP = 1e-9


class AffineError(ValueError):
    pass


@dataclass(frozen=True)
class AffineRanges:
    rotation: tuple[float, float] = (-30.0, 30.0)
    scale: tuple[float, float] = (0.8, 1.2)
    shear: tuple[float, float] = (-10.0, 10.0)
    translate: tuple[float, float] = (-0.1, 0.1)

    def __post_init__(self):
        for name in ("rotation", "scale", "shear", "translate"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if lo > hi:
                raise AffineError(f"{name} range has min > max: {(lo, hi)}")
        if self.scale[0] <= 0:
            raise AffineError("scale range must be positive")

    @classmethod
    def identity(cls) -> AffineRanges:
        return cls((0, 0), (1, 1), (0, 0), (0, 0))


@dataclass(frozen=True)
class AffineParams:
    rotation: float = 0.0
    scale: float = 1.0
    shear: float = 0.0
    tx: float = 0.0  # fraction of W
    ty: float = 0.0  # fraction of H

    @property
    def matrix(self) -> np.ndarray:
        """2x2 matrix acting on (x, y) = (col, row) column vectors."""
        th, sh = math.radians(self.rotation), math.radians(self.shear)
        c, s = math.cos(th), math.sin(th)
        rot = np.array([[c, -s], [s, c]])
        shear = np.array([[1.0, math.tan(sh)], [0.0, 1.0]])
        A = rot @ shear * self.scale
        # exact zeros/ones for right-angle rotations
        return np.where(np.abs(A - np.round(A)) < 1e-12, np.round(A), A)

    def translation(self, h: int, w: int) -> np.ndarray:
        return np.array([self.tx * w, self.ty * h])

    def is_invertible(self) -> bool:
        return self.scale > 0 and abs(np.linalg.det(self.matrix)) > 1e-6


def sample_affine(rng: np.random.Generator, ranges: AffineRanges = AffineRanges(),
                  max_tries: int = 10) -> AffineParams:
    """Independent uniform draws of rotation, scale, shear, tx, ty (in that order)."""
    for _ in range(max_tries):
        p = AffineParams(
            rotation=float(rng.uniform(*ranges.rotation)),
            scale=float(rng.uniform(*ranges.scale)),
            shear=float(rng.uniform(*ranges.shear)),
            tx=float(rng.uniform(*ranges.translate)),
            ty=float(rng.uniform(*ranges.translate)),
        )
        if p.is_invertible():
            return p
    raise AffineError(f"no invertible affine map after {max_tries} draws")


def affine_grid(p: AffineParams, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Source coordinates for every output pixel, plus the in-bounds mask.

    Returns ``grid`` of shape (H, W, 2) holding (row, col) and a boolean
    ``mask`` of shape (H, W). Output pixel q reads source
    A^-1 (q - center - t) + center.
    """
    if not p.is_invertible():
        raise AffineError(f"affine map is not invertible: {p}")
    A_inv = np.linalg.inv(p.matrix)
    A_inv = np.where(np.abs(A_inv - np.round(A_inv)) < 1e-12, np.round(A_inv), A_inv)
    t = p.translation(h, w)
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    q = np.stack([cols - center[0] - t[0], rows - center[1] - t[1]], axis=-1)
    src = q @ A_inv.T + center
    src_x, src_y = src[..., 0], src[..., 1]
    grid = np.stack([src_y, src_x], axis=-1)
    near = np.round(grid)
    grid = np.where(np.abs(grid - near) < _SNAP, near, grid)
    mask = ((grid[..., 0] >= 0) & (grid[..., 0] <= h - 1)
            & (grid[..., 1] >= 0) & (grid[..., 1] <= w - 1))
    return grid, mask


def warp_labels(Y: np.ndarray, grid: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Nearest-neighbour lookup; invalid pixels get ``SENTINEL``."""
    Y = np.asarray(Y)
    h, w = Y.shape
    r = np.clip(np.floor(grid[..., 0] + 0.5).astype(np.int64), 0, h - 1)
    c = np.clip(np.floor(grid[..., 1] + 0.5).astype(np.int64), 0, w - 1)
    return np.where(mask, Y[r, c], SENTINEL)
