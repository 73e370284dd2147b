"""Front-view RGB-D to observation voxels, and trilinear sampling of voxel grids."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .scene import CameraModel, camera_rays

log = logging.getLogger(__name__)

N_CHANNELS = 10  # rgb(3) + world xyz(3) + normalised index(3) + occupancy(1)


@dataclass
class ObservationVoxel:
    grid: np.ndarray  # (N, N, N, 10)
    bounds: tuple

    @property
    def n(self) -> int:
        return self.grid.shape[0]

    @property
    def occupancy(self) -> np.ndarray:
        return self.grid[..., 9]


def cell_index(points: np.ndarray, bounds, n: int) -> np.ndarray:
    """floor((p - lo) / (hi - lo) * n), clamped to [0, n - 1]."""
    lo, hi = np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)
    idx = np.floor((np.asarray(points, dtype=np.float64) - lo) / (hi - lo) * n).astype(np.int64)
    return np.clip(idx, 0, n - 1)


def in_bounds(points: np.ndarray, bounds) -> np.ndarray:
    lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
    return np.all((points >= lo) & (points <= hi), axis=-1)


def cell_centers(bounds, n: int) -> np.ndarray:
    """World coordinates of every cell centre, (n, n, n, 3)."""
    lo, hi = np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)
    ax = (np.arange(n) + 0.5) / n
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)
    return lo + g * (hi - lo)


def voxelize(rgb: np.ndarray, depth: np.ndarray, cam: CameraModel, bounds, n: int, dtype=np.float32) -> ObservationVoxel:
    """Unproject every valid pixel and splat it into its cell.

    Pixels are visited in row-major order and later pixels overwrite earlier
    ones in the same cell.
    """
    if n < 2:
        raise ValueError(f"grid extent must be >= 2, got {n}")
    o, d = camera_rays(cam)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    colors = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    valid = np.isfinite(depth) & (depth > 0)
    pts = o + d * depth[:, None]
    keep = valid & in_bounds(pts, bounds)
    grid = np.zeros((n, n, n, N_CHANNELS), dtype=dtype)
    if not keep.any():
        log.warning("voxelize: no valid points inside workspace bounds; returning an empty grid")
        return ObservationVoxel(grid, bounds)
    pts, colors = pts[keep], colors[keep]
    idx = cell_index(pts, bounds, n)
    flat = np.ravel_multi_index(idx.T, (n, n, n))
    # last writer wins: keep the final occurrence of every cell in traversal order
    rev_unique, rev_pos = np.unique(flat[::-1], return_index=True)
    last = len(flat) - 1 - rev_pos
    cells = idx[last]
    vals = np.concatenate([np.clip(colors[last], 0, 1), pts[last], cells / (n - 1), np.ones((len(last), 1))], axis=1)
    grid[cells[:, 0], cells[:, 1], cells[:, 2]] = vals
    return ObservationVoxel(grid, bounds)


def normalize_points(points, bounds):
    lo, hi = np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)
    if isinstance(points, T.Tensor):
        return (points - lo.astype(points.dtype)) / (hi - lo).astype(points.dtype)
    return (np.asarray(points, dtype=np.float64) - lo) / (hi - lo)


def sample_trilinear(volume, points, bounds, batch_index: np.ndarray | None = None) -> T.Tensor:
    """Trilinearly interpolate a (N, N, N, C) or (B, N, N, N, C) grid at (M, 3) world points.

    Cell centres sit at normalised coordinates (i + 0.5) / N; queries outside
    the workspace clamp to the boundary cell centres.  Differentiable in the
    grid values and, when ``points`` is a Tensor, in the coordinates.
    """
    vol = volume if isinstance(volume, T.Tensor) else T.Tensor(volume)
    if vol.ndim == 4:
        vol = T.reshape(vol, (1,) + vol.shape)
    u = normalize_points(points, bounds)
    if not isinstance(u, T.Tensor):
        u = u.astype(vol.dtype)
    return T.grid_sample(vol, u, batch_index)
