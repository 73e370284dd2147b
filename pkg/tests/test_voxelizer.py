import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fieldpolicy import tensor as T
from fieldpolicy.scene import CameraModel, default_cameras, generate_scene, look_at, render_analytic
from fieldpolicy.voxelizer import cell_index, sample_trilinear, voxelize

BOUNDS = ((-0.5, -0.5, 0.0), (0.5, 0.5, 1.0))


def _corner_oracle(grid, points, bounds):
    """Independent trilinear interpolation: explicit loop over the 8 surrounding cell centres."""
    n = np.array(grid.shape[:3])
    lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
    out = np.zeros((len(points), grid.shape[-1]))
    for m, p in enumerate(points):
        g = (p - lo) / (hi - lo) * n - 0.5  # continuous index, centres at integers
        g = np.clip(g, 0, n - 1)
        base = np.minimum(np.floor(g).astype(int), n - 2)
        frac = g - base
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = ((frac[0] if dx else 1 - frac[0]) * (frac[1] if dy else 1 - frac[1])
                         * (frac[2] if dz else 1 - frac[2]))
                    out[m] += w * grid[base[0] + dx, base[1] + dy, base[2] + dz]
    return out


def test_centre_point_cell_index():
    assert tuple(cell_index(np.array([[0.0, 0.0, 0.5]]), BOUNDS, 100)[0]) == (50, 50, 50)


def test_cell_centre_query_returns_cell():
    rng = np.random.default_rng(0)
    grid = rng.normal(size=(5, 5, 5, 3))
    centre = np.array([[-0.5 + 0.3, -0.5 + 0.5, 0.7]])  # cell (1, 2, 3)
    np.testing.assert_allclose(sample_trilinear(grid, centre, BOUNDS).data[0], grid[1, 2, 3], atol=1e-12)


def test_midpoint_is_mean_of_neighbours():
    rng = np.random.default_rng(1)
    grid = rng.normal(size=(5, 5, 5, 2))
    mid = np.array([[-0.5 + 0.4, -0.5 + 0.5, 0.7]])  # between cells (1,2,3) and (2,2,3)
    np.testing.assert_allclose(sample_trilinear(grid, mid, BOUNDS).data[0], 0.5 * (grid[1, 2, 3] + grid[2, 2, 3]),
                               atol=1e-12)


def test_matches_corner_oracle_on_1000_queries():
    rng = np.random.default_rng(2)
    grid = rng.normal(size=(7, 6, 5, 4))
    pts = rng.uniform(-0.7, 0.7, size=(1000, 3)) + np.array([0, 0, 0.5])
    got = sample_trilinear(grid, pts, BOUNDS).data
    assert np.max(np.abs(got - _corner_oracle(grid, pts, BOUNDS))) <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 9))
def test_affine_reproduction(seed, n):
    rng = np.random.default_rng(seed)
    A, c = rng.normal(size=(3, 2)), rng.normal(size=2)
    lo, hi = np.asarray(BOUNDS[0]), np.asarray(BOUNDS[1])
    ax = (np.arange(n) + 0.5) / n
    centres = lo + np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1) * (hi - lo)
    grid = centres @ A + c
    # interior queries (between the outermost cell centres)
    u = rng.uniform(0.5 / n, 1 - 0.5 / n, size=(200, 3))
    pts = lo + u * (hi - lo)
    np.testing.assert_allclose(sample_trilinear(grid, pts, BOUNDS).data, pts @ A + c, atol=1e-10)


def test_outside_queries_clamp_to_boundary_centres():
    grid = np.arange(8.0).reshape(2, 2, 2, 1)
    far = np.array([[-5.0, -5.0, -5.0], [5.0, 5.0, 5.0]])
    np.testing.assert_allclose(sample_trilinear(grid, far, BOUNDS).data[:, 0], [0.0, 7.0])


def test_gradients_in_grid_and_points():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-0.4, 0.4, size=(6, 3)) + np.array([0, 0, 0.5])
    g = T.Tensor(rng.normal(size=(4, 4, 4, 2)))
    assert T.gradcheck(lambda v: T.sum_(T.square(sample_trilinear(v, pts, BOUNDS))), [g]) <= 1e-6
    p = T.Tensor(pts)
    grid = rng.normal(size=(4, 4, 4, 2))
    err = T.gradcheck(lambda q: T.sum_(T.square(sample_trilinear(grid, q, BOUNDS))), [p], retries=3,
                      rng=np.random.default_rng(0))
    assert err <= 1e-4


def _flat_plane_camera(n=16):
    # looks straight down at the floor from z = 0.9
    c2w = look_at([0, 0, 0.9], [0, 0, 0], up=(0, 1, 0))
    return CameraModel(20, 20, n / 2, n / 2, n, n, c2w, 0.1, 2.0)


def test_uniform_red_plane_voxelizes_red():
    cam = _flat_plane_camera()
    rgb = np.zeros((16, 16, 3))
    rgb[..., 0] = 1.0
    depth = np.full((16, 16), 0.5)
    obs = voxelize(rgb, depth, cam, BOUNDS, 20)
    occ = obs.occupancy == 1
    assert occ.any()
    np.testing.assert_array_equal(obs.grid[occ][:, :3], np.tile([1.0, 0, 0], (occ.sum(), 1)))
    assert set(np.unique(obs.occupancy)) <= {0.0, 1.0}
    xyz = obs.grid[occ][:, 3:6]
    assert np.all(xyz >= np.asarray(BOUNDS[0]) - 1e-6) and np.all(xyz <= np.asarray(BOUNDS[1]) + 1e-6)
    assert np.all(obs.grid[~occ] == 0)


def test_all_points_outside_warns_and_returns_empty(caplog):
    cam = _flat_plane_camera()
    with caplog.at_level(logging.WARNING):
        obs = voxelize(np.ones((16, 16, 3)), np.full((16, 16), 1.95), cam, BOUNDS, 8)
    assert "no valid points" in caplog.text
    assert not obs.grid.any()


def test_last_writer_wins_in_pixel_order():
    cam = _flat_plane_camera(4)
    rgb = np.arange(48, dtype=np.float64).reshape(4, 4, 3) / 48
    obs = voxelize(rgb, np.full((4, 4), 0.5), cam, BOUNDS, 2)
    # every pixel lands in one of few cells; each stored colour is that of the last pixel in row-major order
    from fieldpolicy.scene import camera_rays
    o, d = camera_rays(cam)
    pts = o + d * 0.5
    cells = cell_index(pts, BOUNDS, 2)
    for c in {tuple(x) for x in cells}:
        last = max(i for i, x in enumerate(cells) if tuple(x) == c)
        np.testing.assert_allclose(obs.grid[c][:3], rgb.reshape(-1, 3)[last])


def test_voxelize_is_deterministic_and_rejects_tiny_grid():
    s = generate_scene(5)
    cam = default_cameras(1, 24)[0]
    rgb, depth, _ = render_analytic(s, cam)
    a = voxelize(rgb, depth, cam, s.bounds, 32)
    b = voxelize(rgb, depth, cam, s.bounds, 32)
    assert a.grid.tobytes() == b.grid.tobytes()
    with pytest.raises(ValueError):
        voxelize(rgb, depth, cam, s.bounds, 1)
