"""Joint optimisation of encoder, neural feature field and policy; evaluation and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gnft, nn
from . import tensor as T
from .demos import DEFAULT_EPS_V, SceneData, TrainingTuple, extract_keyframes, make_training_tuples, translate_tuple
from .encoder import EncoderConfig, VoxelEncoder
from .gnf import GNF, GNFConfig, Rays, SamplingConfig, generate_rays, psnr, recon_loss, \
    render_coarse_fine, render_image
from .optim import Adam, clip_grad_norm
from .scene import ray_box
from .policy import PolicyConfig, PolicyNetwork, action_loss, decode_action

log = logging.getLogger(__name__)

FEATURE_SOURCES = ("dataset", "none", "rgb-projection")
PRESETS = ("desk", "paper-shapes", "realworld")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    lambda_recon: float = 0.01
    lambda_feat: float = 0.01
    lambda_action: float = 1.0
    b_ray: int = 128
    n_coarse: int = 32
    n_importance: int = 16
    n_depth_guided: int = 16
    depth_spread: float = 0.05
    iterations: int = 1000
    batch_size: int = 1
    seed: int = 0
    grid: int = 32
    volume_channels: int = 32
    encoder_widths: tuple = (8, 16, 32, 64)
    gnf_hidden: int = 64
    gnf_blocks: int = 5
    feat_dim: int = 64
    feature_view_independent: bool = True
    d_tok: int = 64
    n_latents: int = 64
    latent_dim: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    head_dim: int = 32
    ff_mult: int = 2
    stride: int = 4
    lang_tokens: int = 16
    lang_dim: int = 32
    mlp_hidden: int = 128
    aux_views: int = 4
    front_view: int = 0
    eps_v: float = DEFAULT_EPS_V
    no_gnf: bool = False
    no_rgb: bool = False
    no_feat: bool = False
    no_dgs: bool = False
    no_skip: bool = False
    feature_source: str = "dataset"
    precision: str = "float32"
    deterministic: bool = True
    lamb: bool = False
    aug_shift: int = 0  # max whole-cell scene translation in x and y per training item
    grad_clip: float = 0.0  # global gradient L2 norm cap; 0 disables
    lr_schedule: str = "constant"  # or "cosine": decay to zero over ``iterations``
    ckpt_every: int = 0
    log_every: int = 0

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        if self.lambda_recon < 0 or self.lambda_feat < 0 or self.lambda_action < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.aug_shift < 0:
            raise ValueError("aug_shift must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be constant or cosine")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        if self.b_ray < 1:
            raise ValueError("b_ray must be >= 1")
        if self.feature_source not in FEATURE_SOURCES:
            raise ValueError(f"feature_source must be one of {FEATURE_SOURCES}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def uses_rgb(self) -> bool:
        return not self.no_gnf and not self.no_rgb

    @property
    def uses_feat(self) -> bool:
        return not self.no_gnf and not self.no_feat and self.feature_source != "none"

    @property
    def uses_gnf(self) -> bool:
        return self.lambda_recon > 0 and (self.uses_rgb or self.uses_feat)

    @property
    def uses_policy(self) -> bool:
        return self.lambda_action > 0

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(widths=self.encoder_widths, out_channels=self.volume_channels)

    def gnf_config(self) -> GNFConfig:
        return GNFConfig(volume_channels=self.volume_channels, hidden=self.gnf_hidden, n_blocks=self.gnf_blocks,
                         feat_dim=self.feat_dim, feature_view_independent=self.feature_view_independent)

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(grid=self.grid, volume_channels=self.volume_channels, stride=self.stride,
                            d_tok=self.d_tok, n_latents=self.n_latents, latent_dim=self.latent_dim,
                            n_blocks=self.n_blocks, n_heads=self.n_heads, head_dim=self.head_dim,
                            ff_mult=self.ff_mult, lang_tokens=self.lang_tokens, lang_dim=self.lang_dim,
                            pt_channels=self.volume_channels, mlp_hidden=self.mlp_hidden, no_skip=self.no_skip)

    def sampling(self) -> SamplingConfig:
        return SamplingConfig(self.n_coarse, self.n_importance, self.n_depth_guided, self.depth_spread,
                              use_depth_guided=not self.no_dgs)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name == "desk":
            base = {}
        elif name == "realworld":
            base = {"lambda_recon": 1.0, "lambda_action": 0.1}
        elif name == "paper-shapes":
            base = {"grid": 100, "volume_channels": 128, "gnf_hidden": 512, "feat_dim": 512, "b_ray": 512,
                    "n_coarse": 64, "n_importance": 0, "n_depth_guided": 32, "d_tok": 256, "n_latents": 2048,
                    "latent_dim": 512, "n_blocks": 6, "n_heads": 8, "head_dim": 64, "ff_mult": 1, "stride": 5,
                    "lang_tokens": 77, "lang_dim": 512, "mlp_hidden": 256, "aux_views": 19, "batch_size": 2}
        else:
            raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")
        base.update(overrides)
        return cls.from_json(base)


class Agent(nn.Module):
    """Encoder, coarse/fine feature field and policy sharing one volume."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        rng = np.random.default_rng(config.seed)
        with T.default_dtype(config.dtype):
            self.encoder = VoxelEncoder(config.encoder_config(), rng)
            self.gnf = GNF(config.gnf_config(), rng)
            self.policy = PolicyNetwork(config.policy_config(), rng)


# -- ray tables -----------------------------------------------------------------------

@dataclass
class RayTable:
    """Every workspace-hitting pixel ray of a scene's auxiliary views with its targets."""
    rays: Rays
    rgb: np.ndarray
    feat: np.ndarray
    depth: np.ndarray
    background: np.ndarray


_PROJECTION_SEED = 20240917


def rgb_projection_features(rgb: np.ndarray, feat_dim: int) -> np.ndarray:
    """Features taken as a fixed random linear map of RGB (feature-source swap)."""
    proj = np.random.default_rng(_PROJECTION_SEED).standard_normal((3, feat_dim)) / np.sqrt(3.0)
    return np.asarray(rgb, dtype=np.float64) @ proj


def aux_view_ids(n_views: int, config: TrainConfig) -> list[int]:
    ids = [k for k in range(n_views) if k != config.front_view]
    return ids[:config.aux_views]


def build_ray_table(scene: SceneData, config: TrainConfig) -> RayTable:
    bounds = scene.bounds
    parts = {"o": [], "d": [], "near": [], "far": [], "rgb": [], "feat": [], "depth": []}
    for k in aux_view_ids(len(scene.views), config):
        view = scene.views[k]
        rays = generate_rays(view["cam"], bounds=bounds)
        hit = rays.near < rays.far
        rgb = np.asarray(view["rgb"], dtype=np.float64).reshape(-1, 3)
        if config.feature_source == "rgb-projection":
            feat = rgb_projection_features(rgb, config.feat_dim)
        else:
            feat = np.asarray(view["feat"], dtype=np.float64).reshape(len(rgb), -1)
        parts["o"].append(rays.origins[hit])
        parts["d"].append(rays.dirs[hit])
        parts["near"].append(rays.near[hit])
        parts["far"].append(rays.far[hit])
        parts["rgb"].append(rgb[hit])
        parts["feat"].append(feat[hit])
        parts["depth"].append(np.asarray(view["depth"], dtype=np.float64).reshape(-1)[hit])
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    if cat["feat"].shape[1] != config.feat_dim:
        raise T.ShapeError(f"dataset features have {cat['feat'].shape[1]} channels, config expects {config.feat_dim}")
    bg = np.asarray(scene.spec.background if scene.spec is not None else (1.0, 1.0, 1.0), dtype=np.float64)
    return RayTable(Rays(cat["o"], cat["d"], cat["near"], cat["far"]), cat["rgb"], cat["feat"], cat["depth"], bg)


def build_tuples(scenes: list[SceneData], config: TrainConfig, demo_filter=None) -> list[TrainingTuple]:
    tuples = []
    for s_i, scene in enumerate(scenes):
        cache: dict = {}
        for d_i, demo in enumerate(scene.demos):
            if demo_filter is not None and not demo_filter(s_i, d_i):
                continue
            keys = extract_keyframes(demo, config.eps_v)
            tuples += make_training_tuples(demo, keys, scene.views, scene.bounds, config.grid,
                                           front=config.front_view, lang_tokens=config.lang_tokens,
                                           lang_dim=config.lang_dim, scene_id=s_i, demo_id=d_i,
                                           voxel_cache=cache)
    return tuples


# -- training --------------------------------------------------------------------------

class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class LossTerms:
    total: T.Tensor
    l_action: float
    l_recon_rgb: float
    l_recon_feat: float

    @property
    def loss(self) -> float:
        return float(self.total.data)

    def record(self, it: int) -> dict:
        return {"iter": it, "loss": self.loss, "l_action": self.l_action, "l_recon_rgb": self.l_recon_rgb,
                "l_recon_feat": self.l_recon_feat}


class Trainer:
    def __init__(self, config: TrainConfig, scenes: list[SceneData], tuples: list[TrainingTuple] | None = None,
                 agent: Agent | None = None):
        self.config = config
        self.scenes = scenes
        self.tuples = build_tuples(scenes, config) if tuples is None else tuples
        if not self.tuples:
            raise ValueError("no training tuples")
        self.agent = agent or Agent(config)
        self.optimizer = Adam(self.agent.parameters(), lr=config.lr, lamb=config.lamb)
        self.ray_tables = {}
        if config.uses_gnf:
            for s in {t.scene_id for t in self.tuples}:
                self.ray_tables[s] = build_ray_table(scenes[s], config)
        # independent streams so ablations that drop rays keep identical action batches
        seeds = np.random.SeedSequence(config.seed).spawn(2)
        self.action_rng = np.random.default_rng(seeds[0])
        self.ray_rng = np.random.default_rng(seeds[1])
        self.iteration = 0
        self.history: list[dict] = []

    @property
    def bounds(self):
        return self.scenes[self.tuples[0].scene_id].bounds

    def sample_batch(self) -> list[TrainingTuple]:
        idx = self.action_rng.integers(len(self.tuples), size=self.config.batch_size)
        return [self.tuples[i] for i in idx]

    def sample_shifts(self, batch: list[TrainingTuple]) -> np.ndarray | None:
        """Per-item (dx, dy, 0) cell offsets, limited so the target cell stays in the grid."""
        k = self.config.aug_shift
        if k <= 0:
            return None
        n = self.config.grid
        s = self.action_rng.integers(-k, k + 1, size=(len(batch), 3))
        s[:, 2] = 0
        trans = np.array([t.action.trans for t in batch])
        return np.clip(s, -trans, n - 1 - trans)

    def sample_rays(self, batch: list[TrainingTuple], shifts: np.ndarray | None = None):
        """b_ray rays pooled over the batch, uniform over (view, pixel) of each item's scene."""
        cfg = self.config
        item = self.ray_rng.integers(len(batch), size=cfg.b_ray)
        sel = []
        for b, tup in enumerate(batch):
            n_b = int(np.sum(item == b))
            if n_b:
                table = self.ray_tables[tup.scene_id]
                sel.append((b, table, self.ray_rng.integers(len(table.rgb), size=n_b)))
        rays = Rays(*(np.concatenate([getattr(t.rays, f)[i] for _, t, i in sel])
                      for f in ("origins", "dirs", "near", "far")))
        bidx = np.concatenate([np.full(len(i), b) for b, _, i in sel])
        if shifts is not None:
            # move the cameras with the scene; the workspace box stays put
            lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
            origins = rays.origins + shifts[bidx] * (hi - lo) / self.config.grid
            t_in, t_out = ray_box(origins, rays.dirs, lo, hi)
            near, far = np.maximum(t_in, 0.0), t_out
            miss = ~(near < far)
            rays = Rays(origins, rays.dirs, np.where(miss, rays.near, near), np.where(miss, rays.near, far))
        rgb = np.concatenate([t.rgb[i] for _, t, i in sel])
        feat = np.concatenate([t.feat[i] for _, t, i in sel])
        depth = np.concatenate([t.depth[i] for _, t, i in sel])
        bg = np.concatenate([np.broadcast_to(t.background, (len(i), 3)) for _, t, i in sel])
        return rays, bidx, rgb, feat, depth, bg

    def total_loss(self, batch: list[TrainingTuple], shifts: np.ndarray | None = None) -> LossTerms:
        """L = lambda_action * L_action + lambda_recon * (L_rgb + lambda_feat * L_feat)."""
        cfg = self.config
        agent = self.agent
        dtype = cfg.dtype
        obs = np.stack([t.obs.grid for t in batch]).astype(dtype)
        zero = T.Tensor(np.zeros((), dtype=np.float64))
        with T.default_dtype(dtype):
            if not (cfg.uses_policy or cfg.uses_gnf):
                return LossTerms(zero, 0.0, 0.0, 0.0)
            v = agent.encoder(T.Tensor(obs))
            l_action = zero
            if cfg.uses_policy:
                proprio = np.stack([t.proprio for t in batch])
                lang = np.stack([t.lang.tokens for t in batch])
                q = agent.policy(v, proprio, lang)
                l_action = T.astype(action_loss(q, [t.action for t in batch]), np.float64)
            l_rgb = l_feat = zero
            if cfg.uses_gnf:
                rays, bidx, rgb, feat, depth, bg = self.sample_rays(batch, shifts)
                out_c, out_f = render_coarse_fine(agent.gnf, v, self.bounds, rays, cfg.sampling(), self.ray_rng,
                                                  None if cfg.no_dgs else depth, bidx)
                for out in (out_c, out_f):
                    pred = out.rgb + T.reshape(1.0 - out.acc, (-1, 1)) * T.Tensor(bg.astype(dtype))
                    _, r, f = recon_loss(pred, out.feat, rgb, feat, cfg.lambda_feat, cfg.uses_rgb, cfg.uses_feat)
                    l_rgb = l_rgb + T.astype(r, np.float64)
                    l_feat = l_feat + T.astype(f, np.float64)
        l_recon = l_rgb + cfg.lambda_feat * l_feat
        total = cfg.lambda_action * l_action + cfg.lambda_recon * l_recon
        return LossTerms(total, float(l_action.data), float(l_rgb.data), float(l_feat.data))

    def lr_at(self, iteration: int) -> float:
        cfg = self.config
        if cfg.lr_schedule == "constant":
            return cfg.lr
        frac = min(iteration / max(cfg.iterations, 1), 1.0)
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))

    def step(self) -> dict:
        batch = self.sample_batch()
        shifts = self.sample_shifts(batch)
        if shifts is not None:
            batch = [translate_tuple(t, s) for t, s in zip(batch, shifts)]
        self.optimizer.zero_grad()
        terms = self.total_loss(batch, shifts)
        rec = terms.record(self.iteration + 1)
        if not math.isfinite(rec["loss"]):
            raise NonFiniteLossError(f"non-finite loss at iteration {self.iteration + 1}: {rec}")
        if terms.total._parents or terms.total.requires_grad:
            T.backward(terms.total)
            self.optimizer.lr = self.lr_at(self.iteration)
            if self.config.grad_clip > 0:
                clip_grad_norm(self.optimizer.params, self.config.grad_clip)
            self.optimizer.step()
        self.iteration += 1
        self.history.append(rec)
        return rec

    def train(self, iterations: int | None = None, out_dir=None, callback=None) -> list[dict]:
        """Run ``iterations`` steps, appending to ``metrics.jsonl`` and checkpointing in ``out_dir``."""
        cfg = self.config
        n = cfg.iterations if iterations is None else iterations
        out = Path(out_dir) if out_dir is not None else None
        metrics = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            metrics = open(out / "metrics.jsonl", "a")
        try:
            for _ in range(n):
                try:
                    rec = self.step()
                except NonFiniteLossError:
                    if out is not None:
                        log.error("aborting; last good checkpoint kept under %s", out)
                    raise
                if metrics is not None:
                    metrics.write(json.dumps(rec) + "\n")
                    metrics.flush()
                if cfg.log_every and self.iteration % cfg.log_every == 0:
                    log.info("iter %d loss %.5f action %.4f rgb %.4f feat %.4f", rec["iter"], rec["loss"],
                             rec["l_action"], rec["l_recon_rgb"], rec["l_recon_feat"])
                if out is not None and cfg.ckpt_every and self.iteration % cfg.ckpt_every == 0:
                    save_checkpoint(out / f"ckpt_{self.iteration:06d}", self)
                if callback is not None:
                    callback(self, rec)
        finally:
            if metrics is not None:
                metrics.close()
        if out is not None:
            save_checkpoint(out / "ckpt_final", self)
        return self.history


# -- checkpoints ---------------------------------------------------------------------------

def save_checkpoint(path, trainer: Trainer) -> Path:
    """Named parameters and optimizer moments as GNFT files, plus ``manifest.json``."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    (path / "optim").mkdir(exist_ok=True)
    params = {}
    for i, (name, p) in enumerate(trainer.agent.named_parameters()):
        fname = f"params/{name}.gnft"
        gnft.save(path / fname, p.data)
        gnft.save(path / f"optim/{name}.m.gnft", trainer.optimizer.m[i])
        gnft.save(path / f"optim/{name}.v.gnft", trainer.optimizer.v[i])
        params[name] = {"file": fname, "shape": list(p.shape)}
    manifest = {"iteration": trainer.iteration, "config": trainer.config.to_json(), "params": params,
                "optimizer": {"t": trainer.optimizer.t, "lr": trainer.optimizer.lr, "lamb": trainer.optimizer.lamb},
                "rng": {"action": trainer.action_rng.bit_generator.state, "ray": trainer.ray_rng.bit_generator.state}}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return path


def load_agent(path) -> tuple[Agent, TrainConfig, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    config = TrainConfig.from_json(manifest["config"])
    agent = Agent(config)
    state = {name: gnft.load(path / entry["file"]) for name, entry in manifest["params"].items()}
    agent.load_state_dict(state)
    return agent, config, manifest


def load_trainer(path, scenes: list[SceneData], tuples=None) -> Trainer:
    """Restore parameters, optimizer moments and the iteration counter."""
    path = Path(path)
    agent, config, manifest = load_agent(path)
    trainer = Trainer(config, scenes, tuples, agent=agent)
    names = [n for n, _ in agent.named_parameters()]
    trainer.optimizer.load_state({
        "t": manifest["optimizer"]["t"],
        "m": [gnft.load(path / f"optim/{n}.m.gnft") for n in names],
        "v": [gnft.load(path / f"optim/{n}.v.gnft") for n in names],
    })
    trainer.iteration = int(manifest["iteration"])
    if "rng" in manifest:
        trainer.action_rng.bit_generator.state = manifest["rng"]["action"]
        trainer.ray_rng.bit_generator.state = manifest["rng"]["ray"]
    return trainer


# -- evaluation ------------------------------------------------------------------------------

def predict_actions(agent: Agent, config: TrainConfig, tuples: list[TrainingTuple], chunk: int = 4):
    preds = []
    with T.no_grad(), T.default_dtype(config.dtype):
        for s in range(0, len(tuples), chunk):
            part = tuples[s:s + chunk]
            v = agent.encoder(T.Tensor(np.stack([t.obs.grid for t in part]).astype(config.dtype)))
            q = agent.policy(v, np.stack([t.proprio for t in part]), np.stack([t.lang.tokens for t in part]))
            preds += decode_action(q)
    return preds


def evaluate_policy(agent: Agent, config: TrainConfig, tuples: list[TrainingTuple]) -> dict:
    """Per-head keyframe accuracy on held-out tuples."""
    if not tuples:
        raise ValueError("evaluation set is empty")
    preds = predict_actions(agent, config, tuples)
    gt = [t.action for t in tuples]
    p_t = np.array([p.trans for p in preds])
    g_t = np.array([g.trans for g in gt])
    p_r = np.array([p.rot for p in preds])
    g_r = np.array([g.rot for g in gt])
    return {
        "n": len(tuples),
        "translation_exact": float(np.mean(np.all(p_t == g_t, axis=1))),
        "translation_within_one": float(np.mean(np.max(np.abs(p_t - g_t), axis=1) <= 1)),
        "rotation_exact": float(np.mean(np.all(p_r == g_r, axis=1))),
        "rotation_per_axis": [float(x) for x in np.mean(p_r == g_r, axis=0)],
        "open": float(np.mean([p.open == g.open for p, g in zip(preds, gt)])),
        "collide": float(np.mean([p.collide == g.collide for p, g in zip(preds, gt)])),
    }


def scene_volume(agent: Agent, config: TrainConfig, scene: SceneData) -> T.Tensor:
    from .voxelizer import voxelize

    front = scene.views[config.front_view]
    obs = voxelize(front["rgb"], front["depth"], front["cam"], scene.bounds, config.grid)
    with T.no_grad(), T.default_dtype(config.dtype):
        return agent.encoder(T.Tensor(obs.grid[None].astype(config.dtype)))


def render_view(agent: Agent, config: TrainConfig, scene: SceneData, view_id: int, volume=None, fine=True):
    view = scene.views[view_id]
    v = scene_volume(agent, config, scene) if volume is None else volume
    bg = scene.spec.background if scene.spec is not None else (1.0, 1.0, 1.0)
    depth = None if config.no_dgs else view["depth"]
    with T.default_dtype(config.dtype):
        return render_image(agent.gnf, v, scene.bounds, view["cam"], config.sampling(), bg, depth=depth, fine=fine)


def evaluate_render(agent: Agent, config: TrainConfig, scene: SceneData, view_ids=None) -> list[dict]:
    """PSNR (capped at 99) and mean per-pixel feature MSE for each requested view."""
    ids = aux_view_ids(len(scene.views), config) if view_ids is None else list(view_ids)
    v = scene_volume(agent, config, scene)
    report = []
    for k in ids:
        rgb, feat = render_view(agent, config, scene, k, volume=v)
        gt_feat = np.asarray(scene.views[k]["feat"], dtype=np.float64)
        if config.feature_source == "rgb-projection":
            gt_feat = rgb_projection_features(scene.views[k]["rgb"], config.feat_dim).reshape(gt_feat.shape[:2] + (-1,))
        report.append({"view": k, "psnr": psnr(rgb, scene.views[k]["rgb"]),
                       "feature_mse": float(np.mean(np.sum((feat - gt_feat) ** 2, axis=-1)))})
    return report
