import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from fieldpolicy import tensor as T
from fieldpolicy.gnf import (GNF, GNFConfig, Rays, SamplingConfig, SceneField, VolumeField, generate_rays,
                             positional_encoding, psnr, recon_loss, render_coarse_fine, render_image, render_rays,
                             sample_depth_guided, sample_importance, sample_stratified)
from fieldpolicy.scene import default_cameras, generate_scene, render_rays_analytic, camera_rays

BOUNDS = ((-0.5, -0.5, 0.0), (0.5, 0.5, 1.0))


class ConstField:
    """Homogeneous medium of density sigma and colour c everywhere."""

    def __init__(self, sigma, color=(1.0, 0.0, 0.0), feat_dim=2):
        self.sigma, self.color, self.feat_dim = sigma, np.asarray(color, dtype=np.float64), feat_dim

    def __call__(self, p, d, b=None):
        n = len(p)
        return (T.Tensor(np.full(n, float(self.sigma))), T.Tensor(np.tile(self.color, (n, 1))),
                T.Tensor(np.ones((n, self.feat_dim))))


def _ray(near=0.0, far=1.0):
    return Rays(np.zeros((1, 3)), np.array([[1.0, 0, 0]]), np.array([near]), np.array([far]))


def test_positional_encoding_values():
    pe = positional_encoding(np.array([[0.0, 0.5, 0.25]])).data[0]
    assert pe.shape == (36,)
    # level 0: sin(pi p), cos(pi p) for the three coordinates
    np.testing.assert_allclose(pe[:3], np.sin(np.pi * np.array([0, 0.5, 0.25])), atol=1e-15)
    np.testing.assert_allclose(pe[3:6], np.cos(np.pi * np.array([0, 0.5, 0.25])), atol=1e-15)
    np.testing.assert_allclose(pe[30:33], np.sin(32 * np.pi * np.array([0, 0.5, 0.25])), atol=1e-12)
    assert np.allclose(positional_encoding(np.zeros((1, 3))).data[0, 3::6], 1.0)


def test_field_widths():
    assert GNFConfig().input_dim == 3 + 36 + 3 + 32
    assert GNFConfig.full_scale().input_dim == 170 and GNFConfig.full_scale().output_dim == 516


def test_stratified_bin_centres_and_bins():
    np.testing.assert_allclose(sample_stratified([0.0], [1.0], 4)[0], [0.125, 0.375, 0.625, 0.875])
    t = sample_stratified(np.zeros(50), np.full(50, 2.0), 8, np.random.default_rng(0))
    bins = np.floor(t / 0.25)
    np.testing.assert_array_equal(bins, np.tile(np.arange(8), (50, 1)))
    with pytest.raises(ValueError):
        sample_stratified([0.0], [1.0], 1)


def test_importance_matches_piecewise_pdf():
    edges = np.array([[0.0, 0.25, 0.5, 0.75, 1.0]])
    w = np.array([[0.1, 0.0, 0.6, 0.3]])
    s = sample_importance(edges, w, 20_000, np.random.default_rng(1))[0]
    assert np.all(np.diff(s) >= 0)
    assert not np.any((s > 0.25) & (s < 0.5))  # the empty bin gets nothing

    def cdf(x):
        x = np.clip(x, 0, 1)
        k = np.minimum((x / 0.25).astype(int), 3)
        c = np.concatenate([[0], np.cumsum(w[0])])
        return c[k] + w[0, k] * (x - 0.25 * k) / 0.25

    assert stats.kstest(s, cdf).pvalue > 0.01


def test_importance_zero_weights_fall_back_to_stratified():
    s = sample_importance(np.array([[0.0, 0.5, 1.0]]), np.zeros((1, 2)), 4)
    np.testing.assert_allclose(s[0], [0.125, 0.375, 0.625, 0.875])


def test_depth_guided_statistics():
    near, far = np.zeros(1), np.ones(1)
    s = sample_depth_guided(near, far, np.array([0.6]), 20_000, 0.02, np.random.default_rng(2))[0]
    assert abs(s.mean() - 0.6) < 1e-3 and abs(s.std() - 0.02) < 1e-3
    s = sample_depth_guided(near, far, np.array([np.nan]), 4, 0.02, None)[0]
    assert np.all((s >= 0) & (s <= 1)) and np.all(np.floor(s * 4) == np.arange(4))


def test_zero_density_renders_nothing():
    out = render_rays(ConstField(0.0), _ray(), sample_stratified([0.0], [1.0], 16))
    assert out.acc.data[0] == 0.0 and np.all(out.rgb.data == 0)
    assert out.depth.data[0] == pytest.approx(1.0)


@pytest.mark.parametrize("S", [2, 3, 16, 64])
def test_homogeneous_quadrature_is_exact(S):
    for sigma in (0.3, 1.0, 4.0):
        out = render_rays(ConstField(sigma), _ray(0.5, 1.5), sample_stratified([0.5], [1.5], S))
        assert out.acc.data[0] == pytest.approx(1 - np.exp(-sigma), rel=1e-12)


def test_transmittance_nonincreasing_and_weights_bounded():
    s = generate_scene(3)
    cam = default_cameras(1, 8)[0]
    rays = generate_rays(cam, bounds=s.bounds)
    hit = rays.near < rays.far
    out = render_rays(SceneField(s), rays.subset(hit), sample_stratified(rays.near[hit], rays.far[hit], 32,
                                                                         np.random.default_rng(0)))
    assert np.all(np.diff(out.transmittance.data, axis=-1) <= 1e-15)
    assert np.all(out.weights.data >= 0) and np.all(out.acc.data <= 1 + 1e-12)


def test_scene_field_converges_to_analytic_render():
    s = generate_scene(7)
    cam = default_cameras(2, 8)[1]
    o, d = camera_rays(cam)
    rays = Rays(o, d, np.full(len(o), cam.near), np.full(len(o), cam.far))
    rgb, depth, feat, acc = render_rays_analytic(s, o, d, cam.near, cam.far)
    out = render_rays(SceneField(s), rays, sample_stratified(rays.near, rays.far, 4096))
    assert np.max(np.abs(out.acc.data - acc)) < 5e-3
    assert np.max(np.abs(out.feat.data - feat)) < 5e-3


def test_render_rejects_bad_depths():
    with pytest.raises(ValueError):
        render_rays(ConstField(1.0), _ray(), np.array([[0.5]]))
    with pytest.raises(ValueError):
        render_rays(ConstField(1.0), _ray(), np.array([[0.5, 0.2]]))


def test_recon_loss_examples():
    pred = T.Tensor(np.array([[0.5, 0.5, 0.5]]))
    pf = T.Tensor(np.array([[1.0, 0.0]]))
    total, rgb, feat = recon_loss(pred, pf, [[0.5, 0.5, 0.5]], [[0.0, 0.0]], 0.01)
    assert rgb.data == 0.0 and feat.data == 1.0 and total.data == pytest.approx(0.01)
    total, rgb, feat = recon_loss(pred, pf, [[1.0, 0.5, 0.5]], [[1.0, 0.0]], 0.01)
    assert total.data == pytest.approx(0.25)
    total, rgb, feat = recon_loss(pred, pf, [[1.0, 0.5, 0.5]], [[0.0, 0.0]], 0.01, use_rgb=False)
    assert rgb.data == 0.0 and total.data == pytest.approx(0.01)
    total, rgb, feat = recon_loss(pred, pf, [[1.0, 0.5, 0.5]], [[0.0, 0.0]], 0.01, use_feat=False)
    assert feat.data == 0.0 and total.data == pytest.approx(0.25)


def test_coarse_fine_sample_counts_and_dgs_reallocation():
    gnf = GNF(GNFConfig(volume_channels=4, hidden=8, n_blocks=1, feat_dim=3), np.random.default_rng(0))
    vol = T.Tensor(np.random.default_rng(1).normal(size=(1, 4, 4, 4, 4)))
    rays = generate_rays(default_cameras(1, 4)[0], bounds=BOUNDS)
    rays = rays.subset(rays.near < rays.far)
    cfg = SamplingConfig(n_coarse=8, n_importance=4, n_depth_guided=4)
    c, f = render_coarse_fine(gnf, vol, BOUNDS, rays, cfg, np.random.default_rng(0), gt_depth=rays.near + 0.1)
    assert c.weights.shape == (len(rays), 8) and f.weights.shape == (len(rays), 16)
    c, f = render_coarse_fine(gnf, vol, BOUNDS, rays, cfg, np.random.default_rng(0), gt_depth=None)
    assert f.weights.shape == (len(rays), 16)


def test_feature_head_ignores_view_direction():
    gnf = GNF(GNFConfig(volume_channels=4, hidden=8, n_blocks=1, feat_dim=3), np.random.default_rng(0))
    vol = T.Tensor(np.random.default_rng(1).normal(size=(1, 4, 4, 4, 4)))
    field = VolumeField(gnf.fine, vol, BOUNDS)
    p = np.array([[0.1, 0.0, 0.4]])
    a = field(p, np.array([[1.0, 0, 0]]))
    b = field(p, np.array([[0.0, 0, 1.0]]))
    np.testing.assert_array_equal(a[2].data, b[2].data)


def test_render_image_shapes_and_psnr():
    gnf = GNF(GNFConfig(volume_channels=4, hidden=8, n_blocks=1, feat_dim=3), np.random.default_rng(0))
    vol = T.Tensor(np.zeros((1, 4, 4, 4, 4)))
    cam = default_cameras(1, 6)[0]
    rgb, feat = render_image(gnf, vol, BOUNDS, cam, SamplingConfig(8, 4, 4), [1.0, 1.0, 1.0])
    assert rgb.shape == (6, 6, 3) and feat.shape == (6, 6, 3)
    assert psnr(rgb, rgb) == 99.0
    assert psnr(np.zeros(4), np.ones(4)) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 5.0), st.floats(0.01, 5.0), st.integers(4, 64))
def test_two_segment_opacity_is_bounded_by_segment_extremes(s1, s2, S):
    class Two:
        def __call__(self, p, d, b=None):
            sig = np.where(p[:, 0] < 0.5, s1, s2)
            return T.Tensor(sig), T.Tensor(np.ones((len(p), 3))), T.Tensor(np.zeros((len(p), 1)))

    acc = render_rays(Two(), _ray(), sample_stratified([0.0], [1.0], S)).acc.data[0]
    lo, hi = min(s1, s2), max(s1, s2)
    assert 1 - np.exp(-lo) - 1e-12 <= acc <= 1 - np.exp(-hi) + 1e-12
