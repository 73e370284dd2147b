"""Voxel-conditioned neural feature field: encoding, sampling, rendering and loss.

The field maps a world point x, view direction d and the trilinearly
interpolated volume feature v_x to a density, an RGB colour and a semantic
feature vector.  Rays are rendered by emission-absorption quadrature over a
partition of [t_n, t_f] induced by the sample depths.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .scene import CameraModel, SceneSpec, camera_rays, ray_box
from .tensor import Tensor
from .voxelizer import normalize_points, sample_trilinear

N_FREQS = 6
PE_DIM = 2 * 3 * N_FREQS


def positional_encoding(p) -> Tensor:
    """(M, 3) -> (M, 36): [sin(2^l pi p), cos(2^l pi p)] for l = 0..5, three coordinates each."""
    p = p if isinstance(p, Tensor) else T.Tensor(np.asarray(p))
    parts = []
    for level in range(N_FREQS):
        scaled = p * float(2.0 ** level * np.pi)
        parts += [T.sin(scaled), T.cos(scaled)]
    return T.concat(parts, axis=-1)


@dataclass
class GNFConfig:
    volume_channels: int = 32
    hidden: int = 64
    n_blocks: int = 5
    feat_dim: int = 64
    feature_view_independent: bool = True

    @property
    def input_dim(self) -> int:
        return 3 + PE_DIM + 3 + self.volume_channels

    @property
    def output_dim(self) -> int:
        return 3 + 1 + self.feat_dim

    @classmethod
    def full_scale(cls) -> "GNFConfig":
        return cls(volume_channels=128, hidden=512, n_blocks=5, feat_dim=512)


class ResnetFCBlock(nn.Module):
    def __init__(self, width, rng):
        super().__init__()
        self.fc_0 = nn.Linear(width, width, rng)
        self.fc_1 = nn.Linear(width, width, rng)

    def forward(self, x):
        return x + self.fc_1(T.relu(self.fc_0(T.relu(x))))


class FieldNetwork(nn.Module):
    """Linear -> residual blocks -> ReLU -> Linear(3 + 1 + D_f)."""

    def __init__(self, config: GNFConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.fc_in = nn.Linear(config.input_dim, config.hidden, rng)
        self.blocks = [ResnetFCBlock(config.hidden, rng) for _ in range(config.n_blocks)]
        self.fc_out = nn.Linear(config.hidden, config.output_dim, rng)

    def forward(self, x_norm: Tensor, dirs: Tensor, v_x: Tensor):
        """Returns (sigma (M,), rgb (M, 3), feature (M, D_f))."""
        if self.config.feature_view_independent:
            # one trunk feeds every head, so direction is withheld from all of them
            dirs = T.Tensor(np.zeros(dirs.shape, dtype=x_norm.dtype))
        inp = T.concat([x_norm, positional_encoding(x_norm), dirs, v_x], axis=-1)
        h = self.fc_in(inp)
        for block in self.blocks:
            h = block(h)
        out = self.fc_out(T.relu(h))
        rgb = T.sigmoid(out[:, 0:3])
        sigma = T.softplus(out[:, 3])
        feat = out[:, 4:]
        return sigma, rgb, feat


class GNF(nn.Module):
    """Coarse and fine field networks with independent parameters."""

    def __init__(self, config: GNFConfig | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        self.config = config or GNFConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.coarse = FieldNetwork(self.config, rng)
        self.fine = FieldNetwork(self.config, rng)


class VolumeField:
    """Binds a field network to feature volumes: evaluates at world points."""

    def __init__(self, net: FieldNetwork, volume: Tensor, bounds):
        self.net = net
        self.volume = volume if volume.ndim == 5 else T.reshape(volume, (1,) + volume.shape)
        self.bounds = bounds

    def __call__(self, points: np.ndarray, dirs: np.ndarray, batch_index: np.ndarray | None = None):
        dtype = self.volume.dtype
        v_x = sample_trilinear(self.volume, points, self.bounds, batch_index)
        x_norm = T.Tensor(normalize_points(points, self.bounds).astype(dtype))
        return self.net(x_norm, T.Tensor(np.asarray(dirs, dtype=dtype)), v_x)


def field_eval(net: FieldNetwork, x, d, v_x):
    """Evaluate one field network on normalised points, directions and volume features."""
    wrap = lambda a: a if isinstance(a, Tensor) else T.Tensor(np.atleast_2d(np.asarray(a)))
    return net(wrap(x), wrap(d), wrap(v_x))


class SceneField:
    """The exact medium of a synthetic scene exposed through the field interface."""

    def __init__(self, scene: SceneSpec, dtype=np.float64):
        self.scene = scene
        self.dtype = dtype

    def __call__(self, points, dirs, batch_index=None):
        sigma, rgb, feat = self.scene.query(points)
        return (T.Tensor(sigma.astype(self.dtype)), T.Tensor(rgb.astype(self.dtype)),
                T.Tensor(feat.astype(self.dtype)))


# -- rays -----------------------------------------------------------------------

@dataclass
class Rays:
    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3), unit
    near: np.ndarray  # (R,)
    far: np.ndarray  # (R,)

    def __len__(self):
        return len(self.origins)

    def subset(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx])


def generate_rays(cam: CameraModel, pixels=None, bounds=None) -> Rays:
    """Rays through pixel centres ((row, col) pairs).

    With ``bounds``, each ray's [near, far] is clipped to the workspace box;
    rays that miss it get near == far.
    """
    o, d = camera_rays(cam, pixels)
    near = np.full(len(o), float(cam.near))
    far = np.full(len(o), float(cam.far))
    if bounds is not None:
        t_in, t_out = ray_box(o, d, np.asarray(bounds[0]), np.asarray(bounds[1]))
        near = np.maximum(near, t_in)
        far = np.minimum(far, t_out)
        miss = ~(near < far)
        near = np.where(miss, cam.near, near)
        far = np.where(miss, cam.near, far)
    return Rays(o, d, near, far)


# -- sampling ---------------------------------------------------------------------

def sample_stratified(near, far, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """One sample per equal-width bin of [near, far]; bin centres when ``rng`` is None."""
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    u = (np.arange(n) + 0.5) / n if rng is None else (np.arange(n) + rng.random((len(near), n))) / n
    return near[:, None] + (far - near)[:, None] * u


def sample_importance(edges: np.ndarray, weights: np.ndarray, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant pdf over bins.

    edges: (R, S + 1) bin boundaries; weights: (R, S) nonnegative bin masses.
    Rays with all-zero weight fall back to stratified samples.  Output is
    sorted per ray.  With ``rng`` None the quantiles are evenly spaced.
    """
    edges = np.atleast_2d(np.asarray(edges, dtype=np.float64))
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    R = len(weights)
    weights = np.maximum(weights, 0.0)
    total = weights.sum(axis=-1, keepdims=True)
    empty = total[:, 0] <= 0
    pdf = np.where(empty[:, None], 1.0 / weights.shape[1], weights / np.where(total > 0, total, 1.0))
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    u = np.broadcast_to((np.arange(n) + 0.5) / n, (R, n)) if rng is None else np.sort(rng.random((R, n)), axis=-1)
    out = np.empty((R, n))
    for r in range(R):
        idx = np.searchsorted(cdf[r], u[r], side="right") - 1
        idx = np.clip(idx, 0, weights.shape[1] - 1)
        # skip zero-mass bins that share a cdf value with their successor
        lo_c, hi_c = cdf[r, idx], cdf[r, idx + 1]
        width = np.where(hi_c - lo_c > 0, hi_c - lo_c, 1.0)
        frac = np.clip((u[r] - lo_c) / width, 0.0, 1.0)
        out[r] = edges[r, idx] + frac * (edges[r, idx + 1] - edges[r, idx])
    if empty.any():
        out[empty] = sample_stratified(edges[empty, 0], edges[empty, -1], n, rng)
    return np.sort(out, axis=-1)


def sample_depth_guided(near, far, depth, n: int, spread: float | np.ndarray | None = None,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Normal draws around per-ray ground-truth depth, clamped to [near, far].

    ``spread`` defaults to 5% of (far - near).  Rays whose depth is missing
    (NaN or outside (near, far)) get stratified samples instead.
    """
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    rng = rng if rng is not None else np.random.default_rng(0)
    if depth is None:
        return sample_stratified(near, far, n, rng)
    depth = np.broadcast_to(np.asarray(depth, dtype=np.float64), near.shape)
    s = 0.05 * (far - near) if spread is None else np.broadcast_to(np.asarray(spread, dtype=np.float64), near.shape)
    z = depth[:, None] + s[:, None] * rng.standard_normal((len(near), n))
    out = np.clip(z, near[:, None], far[:, None])
    missing = ~np.isfinite(depth) | (depth <= near) | (depth >= far)
    if missing.any():
        out[missing] = sample_stratified(near[missing], far[missing], n, rng)
    return np.sort(out, axis=-1)


def interval_edges(depths: np.ndarray, near, far) -> np.ndarray:
    """Partition of [near, far] in which sample i owns [t_i, t_{i+1}); the first owns [near, t_1)."""
    depths = np.atleast_2d(depths)
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    return np.concatenate([near[:, None], depths[:, 1:], far[:, None]], axis=-1)


# -- rendering ----------------------------------------------------------------------

@dataclass
class RenderOutput:
    rgb: Tensor  # (R, 3), background-free
    feat: Tensor  # (R, D_f)
    depth: Tensor  # (R,)
    acc: Tensor  # (R,)
    weights: Tensor  # (R, S)
    transmittance: Tensor  # (R, S)
    edges: np.ndarray  # (R, S + 1)


def render_rays(field, rays: Rays, depths: np.ndarray, batch_index: np.ndarray | None = None) -> RenderOutput:
    """Quadrature of the emission-absorption integral along each ray.

    alpha_i = 1 - exp(-sigma_i delta_i), T_i = prod_{j<i} (1 - alpha_j),
    C = sum_i T_i alpha_i c_i, F = sum_i T_i alpha_i f_i, where delta_i is
    the length of the interval sample i owns.
    """
    depths = np.atleast_2d(np.asarray(depths, dtype=np.float64))
    R, S = depths.shape
    if S < 2:
        raise ValueError("render needs at least 2 depths per ray")
    if np.any(np.diff(depths, axis=-1) < 0):
        raise ValueError("depths must be sorted ascending")
    edges = interval_edges(depths, rays.near, rays.far)
    delta = np.diff(edges, axis=-1)
    pts = rays.origins[:, None, :] + depths[..., None] * rays.dirs[:, None, :]
    dirs = np.broadcast_to(rays.dirs[:, None, :], pts.shape)
    bidx = None if batch_index is None else np.repeat(np.asarray(batch_index), S)
    sigma, rgb, feat = field(pts.reshape(-1, 3), dirs.reshape(-1, 3), bidx)
    dtype = sigma.dtype
    sigma = T.reshape(sigma, (R, S))
    tau = sigma * T.Tensor(delta.astype(dtype))
    trans = T.exp(-T.cumsum_exclusive(tau, axis=-1))
    alpha = 1.0 - T.exp(-tau)
    w = trans * alpha
    w3 = T.reshape(w, (R, S, 1))
    c = T.sum_(w3 * T.reshape(rgb, (R, S, 3)), axis=1)
    f = T.sum_(w3 * T.reshape(feat, (R, S, feat.shape[-1])), axis=1)
    acc = T.sum_(w, axis=1)
    mids = (0.5 * (edges[:, 1:] + edges[:, :-1])).astype(dtype)
    depth = T.sum_(w * T.Tensor(mids), axis=1) + (1.0 - acc) * T.Tensor(rays.far.astype(dtype))
    return RenderOutput(c, f, depth, acc, w, trans, edges)


def render_ray(field, ray: Rays, depths) -> RenderOutput:
    return render_rays(field, ray, np.atleast_2d(depths))


def composite(out: RenderOutput, background) -> Tensor:
    """RGB with the residual transmittance filled by the background colour."""
    bg = np.asarray(background, dtype=out.rgb.dtype).reshape(1, 3)
    return out.rgb + T.reshape(1.0 - out.acc, (-1, 1)) * T.Tensor(bg)


def recon_loss(pred_rgb: Tensor, pred_feat: Tensor | None, gt_rgb, gt_feat, lambda_feat: float,
               use_rgb: bool = True, use_feat: bool = True):
    """sum_r |C - C_hat|^2 + lambda_feat |F - F_hat|^2; returns (total, rgb_term, feat_term)."""
    dtype = pred_rgb.dtype
    zero = T.Tensor(np.zeros((), dtype=dtype))
    rgb_term = T.sum_(T.square(pred_rgb - T.Tensor(np.asarray(gt_rgb, dtype=dtype)))) if use_rgb else zero
    if use_feat and pred_feat is not None:
        feat_term = T.sum_(T.square(pred_feat - T.Tensor(np.asarray(gt_feat, dtype=dtype))))
    else:
        feat_term = zero
    return rgb_term + lambda_feat * feat_term, rgb_term, feat_term


@dataclass
class SamplingConfig:
    n_coarse: int = 32
    n_importance: int = 16
    n_depth_guided: int = 16
    depth_spread: float = 0.05  # fraction of (far - near)
    use_depth_guided: bool = True


def render_coarse_fine(gnf: GNF, volume: Tensor, bounds, rays: Rays, sampling: SamplingConfig,
                       rng: np.random.Generator | None, gt_depth: np.ndarray | None = None,
                       batch_index: np.ndarray | None = None):
    """Coarse pass on stratified samples, then the fine pass on the union of
    coarse, importance and (optionally) depth-guided samples."""
    coarse_field = VolumeField(gnf.coarse, volume, bounds)
    fine_field = VolumeField(gnf.fine, volume, bounds)
    t_c = sample_stratified(rays.near, rays.far, sampling.n_coarse, rng)
    out_c = render_rays(coarse_field, rays, t_c, batch_index)
    extra = []
    n_imp = sampling.n_importance
    use_dgs = sampling.use_depth_guided and gt_depth is not None and sampling.n_depth_guided > 0
    if not use_dgs:
        n_imp += sampling.n_depth_guided
    if n_imp > 0:
        extra.append(sample_importance(out_c.edges, out_c.weights.data, n_imp, rng))
    if use_dgs:
        spread = sampling.depth_spread * (rays.far - rays.near)
        extra.append(sample_depth_guided(rays.near, rays.far, gt_depth, sampling.n_depth_guided, spread,
                                         rng if rng is not None else np.random.default_rng(0)))
    t_f = np.sort(np.concatenate([t_c] + extra, axis=-1), axis=-1)
    out_f = render_rays(fine_field, rays, t_f, batch_index)
    return out_c, out_f


def render_image(gnf: GNF, volume: Tensor, bounds, cam: CameraModel, sampling: SamplingConfig,
                 background, depth: np.ndarray | None = None, chunk: int = 1024, fine: bool = True):
    """Deterministic full-image render (no jitter); returns rgb (H, W, 3) and feature (H, W, D_f)."""
    rays = generate_rays(cam, bounds=bounds)
    hit = rays.near < rays.far
    H, W = cam.H, cam.W
    rgb = np.tile(np.asarray(background, dtype=np.float64), (H * W, 1))
    feat = np.zeros((H * W, gnf.config.feat_dim))
    idx = np.nonzero(hit)[0]
    gt = None if depth is None else np.asarray(depth, dtype=np.float64).reshape(-1)
    with T.no_grad():
        for s in range(0, len(idx), chunk):
            sel = idx[s:s + chunk]
            sub = rays.subset(sel)
            out_c, out_f = render_coarse_fine(gnf, volume, bounds, sub, sampling, None,
                                              None if gt is None else gt[sel])
            out = out_f if fine else out_c
            rgb[sel] = composite(out, background).data
            feat[sel] = out.feat.data
    return rgb.reshape(H, W, 3), feat.reshape(H, W, -1)


def psnr(pred: np.ndarray, gt: np.ndarray, cap: float = 99.0) -> float:
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)) ** 2))
    if mse <= 0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))
