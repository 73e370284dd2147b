"""Voxel action policy: condensed volume tokens, a latent-bottleneck transformer,
volume restoration with a skip connection, and the four discretised Q-heads."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor
from .voxelizer import cell_index

ROT_RESOLUTION = 5.0  # degrees per rotation bin


# -- discrete actions --------------------------------------------------------------

@dataclass(frozen=True)
class DiscretizedAction:
    trans: tuple  # (i, j, k) cell index
    rot: tuple  # bin per euler axis
    open: int
    collide: int

    def is_valid(self, n: int, r_bins: int = 72) -> bool:
        return (len(self.trans) == 3 and all(0 <= int(t) < n for t in self.trans)
                and len(self.rot) == 3 and all(0 <= int(r) < r_bins for r in self.rot)
                and self.open in (0, 1) and self.collide in (0, 1))

    def to_json(self) -> dict:
        return {"trans": list(self.trans), "rot": list(self.rot), "open": self.open, "collide": self.collide}


def rotation_bins(resolution: float = ROT_RESOLUTION) -> int:
    return int(round(360.0 / resolution))


def discretize_action(pose, euler, open_, collide, bounds, n: int, resolution: float = ROT_RESOLUTION) -> DiscretizedAction:
    """Cell of the gripper position (voxelizer floor rule) and floor(angle / resolution) mod R per axis."""
    cell = cell_index(np.asarray(pose, dtype=np.float64)[None], bounds, n)[0]
    r_bins = rotation_bins(resolution)
    ang = np.mod(np.asarray(euler, dtype=np.float64), 360.0)
    rot = np.floor(ang / resolution).astype(np.int64) % r_bins
    return DiscretizedAction(tuple(int(c) for c in cell), tuple(int(r) for r in rot), int(bool(open_)), int(bool(collide)))


def undiscretize_action(action: DiscretizedAction, bounds, n: int, resolution: float = ROT_RESOLUTION):
    """(cell-centre position, bin-centre euler angles, open, collide)."""
    lo, hi = np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)
    pose = lo + (np.asarray(action.trans, dtype=np.float64) + 0.5) / n * (hi - lo)
    euler = np.asarray(action.rot, dtype=np.float64) * resolution + resolution / 2
    return pose, euler, action.open, action.collide


# -- language --------------------------------------------------------------------

@dataclass
class LanguageEmbedding:
    tokens: np.ndarray  # (T_lang, D_lang)
    text: str


def embed_language(task: str, n_tokens: int = 16, dim: int = 32) -> LanguageEmbedding:
    """Pseudo text embedding: unit-variance normal tokens seeded by sha256 of the string."""
    if not task:
        raise ValueError("task string must be nonempty")
    seed = int.from_bytes(hashlib.sha256(task.encode("utf-8")).digest()[:8], "little")
    tokens = np.random.default_rng(seed).standard_normal((n_tokens, dim))
    return LanguageEmbedding(tokens, task)


# -- configuration ---------------------------------------------------------------

@dataclass
class PolicyConfig:
    grid: int = 32
    volume_channels: int = 32
    stride: int = 4
    d_tok: int = 64
    n_latents: int = 64
    latent_dim: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    cross_heads: int = 1
    head_dim: int = 32
    ff_mult: int = 2
    lang_tokens: int = 16
    lang_dim: int = 32
    pt_channels: int = 32
    mlp_hidden: int = 128
    rot_resolution: float = ROT_RESOLUTION
    no_skip: bool = False

    @property
    def coarse(self) -> int:
        return self.grid // self.stride

    @property
    def n_tokens(self) -> int:
        return self.coarse ** 3 + self.lang_tokens

    @property
    def r_bins(self) -> int:
        return rotation_bins(self.rot_resolution)

    @classmethod
    def full_scale(cls) -> "PolicyConfig":
        return cls(grid=100, volume_channels=128, stride=5, d_tok=256, n_latents=2048, latent_dim=512,
                   n_blocks=6, n_heads=8, head_dim=64, ff_mult=1, lang_tokens=77, lang_dim=512,
                   pt_channels=128, mlp_hidden=256)


@dataclass
class QOutputs:
    trans: Tensor  # (B, N, N, N)
    rot: Tensor  # (B, 3, R)
    open: Tensor  # (B, 2)
    collide: Tensor  # (B, 2)


# -- building blocks ---------------------------------------------------------------

class Condense(nn.Module):
    """Conv with kernel = stride, then ReLU."""

    def __init__(self, channels, stride, rng):
        super().__init__()
        self.stride = stride
        self.conv = nn.Conv3d(channels, channels, stride, rng, stride=stride, padding=0)

    def forward(self, v: Tensor) -> Tensor:
        bad = [d for d in v.shape[1:4] if d % self.stride]
        if bad:
            pad = (-bad[0]) % self.stride
            raise T.ShapeError(f"condense: extents {v.shape[1:4]} not divisible by stride {self.stride}; "
                               f"pad each axis by {pad} cells")
        return T.relu(self.conv(v))


class Attention(nn.Module):
    """Multi-head attention; keeps the last attention weights in ``last_weights``."""

    def __init__(self, q_dim, kv_dim, n_heads, head_dim, rng):
        super().__init__()
        self.n_heads, self.head_dim = n_heads, head_dim
        inner = n_heads * head_dim
        self.to_q = nn.Linear(q_dim, inner, rng, bias=False)
        self.to_k = nn.Linear(kv_dim, inner, rng, bias=False)
        self.to_v = nn.Linear(kv_dim, inner, rng, bias=False)
        self.to_out = nn.Linear(inner, q_dim, rng)
        self.last_weights = None

    def _split(self, x):
        B, L, _ = x.shape
        return T.transpose(T.reshape(x, (B, L, self.n_heads, self.head_dim)), (0, 2, 1, 3))

    def forward(self, xq: Tensor, xkv: Tensor) -> Tensor:
        B, Lq, _ = xq.shape
        q, k, v = self._split(self.to_q(xq)), self._split(self.to_k(xkv)), self._split(self.to_v(xkv))
        logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * float(1.0 / np.sqrt(self.head_dim))
        attn = T.softmax(logits, axis=-1)
        self.last_weights = attn.data
        out = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
        return self.to_out(T.reshape(out, (B, Lq, self.n_heads * self.head_dim)))


class FeedForward(nn.Module):
    def __init__(self, dim, mult, rng):
        super().__init__()
        self.fc_0 = nn.Linear(dim, dim * mult, rng)
        self.fc_1 = nn.Linear(dim * mult, dim, rng)

    def forward(self, x):
        return self.fc_1(T.gelu(self.fc_0(x)))


class CrossBlock(nn.Module):
    """q + Attn(LN q, LN kv), then + FF(LN)."""

    def __init__(self, q_dim, kv_dim, n_heads, head_dim, ff_mult, rng):
        super().__init__()
        self.norm_q = nn.LayerNorm(q_dim)
        self.norm_kv = nn.LayerNorm(kv_dim)
        self.attn = Attention(q_dim, kv_dim, n_heads, head_dim, rng)
        self.norm_ff = nn.LayerNorm(q_dim)
        self.ff = FeedForward(q_dim, ff_mult, rng)

    def forward(self, q, kv):
        h = q + self.attn(self.norm_q(q), self.norm_kv(kv))
        return h + self.ff(self.norm_ff(h))


class SelfBlock(nn.Module):
    def __init__(self, dim, n_heads, head_dim, ff_mult, rng):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = Attention(dim, dim, n_heads, head_dim, rng)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult, rng)

    def forward(self, x):
        n = self.norm(x)
        h = x + self.attn(n, n)
        return h + self.ff(self.norm_ff(h))


class Perceiver(nn.Module):
    """Inputs -> cross-attention into learned latents -> self-attention blocks ->
    cross-attention back to the input positions (same extents as the input)."""

    def __init__(self, d_tok, n_latents, latent_dim, n_blocks, n_heads, head_dim, ff_mult, rng, cross_heads=1):
        super().__init__()
        self.latents = T.Tensor((0.02 * rng.standard_normal((n_latents, latent_dim))).astype(T.get_default_dtype()),
                                requires_grad=True)
        self.encode = CrossBlock(latent_dim, d_tok, cross_heads, head_dim, ff_mult, rng)
        self.blocks = [SelfBlock(latent_dim, n_heads, head_dim, ff_mult, rng) for _ in range(n_blocks)]
        self.decode = CrossBlock(d_tok, latent_dim, cross_heads, head_dim, ff_mult, rng)

    def forward(self, seq: Tensor) -> Tensor:
        B = seq.shape[0]
        lat = T.broadcast_to(self.latents, (B,) + self.latents.shape)
        lat = self.encode(lat, seq)
        for block in self.blocks:
            lat = block(lat)
        return self.decode(seq, lat)

    def attention_maps(self) -> dict:
        maps = {"encode": self.encode.attn.last_weights, "decode": self.decode.attn.last_weights}
        for i, b in enumerate(self.blocks):
            maps[f"block{i}"] = b.attn.last_weights
        return maps


def spatial_softmax(x: Tensor) -> Tensor:
    """(B, N, N, N, C) -> (B, C, 3): softmax over cells per channel, then expected
    normalised cell-centre coordinates (i + 0.5) / N."""
    B, D, H, W, C = x.shape
    return _spatial_softmax_cm(T.transpose(T.reshape(x, (B, D * H * W, C)), (0, 2, 1)), (D, H, W))


def _spatial_softmax_cm(xt: Tensor, dims) -> Tensor:
    # channel-major (B, C, cells) input keeps the reductions contiguous
    p = T.softmax(xt, axis=-1)
    axes = [(np.arange(s) + 0.5) / s for s in dims]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3).astype(xt.dtype)
    return T.matmul(p, T.Tensor(coords))


class PolicyNetwork(nn.Module):
    def __init__(self, config: PolicyConfig | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        cfg = config or PolicyConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = cfg
        if cfg.d_tok <= cfg.volume_channels:
            raise ValueError("d_tok must exceed the condensed volume width to leave room for proprioception")
        self.condense = Condense(cfg.volume_channels, cfg.stride, rng)
        self.proprio = nn.Linear(4, cfg.d_tok - cfg.volume_channels, rng)
        self.lang = nn.Linear(cfg.lang_dim, cfg.d_tok, rng)
        self.pos = T.Tensor((0.02 * rng.standard_normal((cfg.n_tokens, cfg.d_tok))).astype(T.get_default_dtype()),
                            requires_grad=True)
        self.perceiver = Perceiver(cfg.d_tok, cfg.n_latents, cfg.latent_dim, cfg.n_blocks, cfg.n_heads,
                                   cfg.head_dim, cfg.ff_mult, rng, cross_heads=cfg.cross_heads)
        self.restore = nn.Linear(cfg.d_tok, cfg.pt_channels, rng)
        fused = cfg.volume_channels + cfg.pt_channels
        self.q_trans = nn.Conv3d(fused, 1, 3, rng)
        self.mlp_0 = nn.Linear(fused * 4, cfg.mlp_hidden, rng)
        self.mlp_1 = nn.Linear(cfg.mlp_hidden, 3 * cfg.r_bins + 4, rng)

    def build_sequence(self, coarse: Tensor, proprio, lang) -> Tensor:
        """(B, n, n, n, C_v) + (B, 4) + (B, T, D_lang) -> (B, n^3 + T, D_tok)."""
        B = coarse.shape[0]
        M = int(np.prod(coarse.shape[1:4]))
        dtype = coarse.dtype
        tokens = T.reshape(coarse, (B, M, coarse.shape[-1]))
        prop = self.proprio(T.Tensor(np.asarray(proprio, dtype=dtype).reshape(B, 4)))
        prop = T.broadcast_to(T.reshape(prop, (B, 1, prop.shape[-1])), (B, M, prop.shape[-1]))
        lang = self.lang(T.Tensor(np.asarray(lang, dtype=dtype).reshape(B, -1, self.config.lang_dim)))
        seq = T.concat([T.concat([tokens, prop], axis=-1), lang], axis=1)
        if seq.shape[1] != self.pos.shape[0]:
            raise T.ShapeError(f"build_sequence: {seq.shape[1]} tokens but positional table has {self.pos.shape[0]}")
        return seq + self.pos

    def restore_volume(self, seq: Tensor, v: Tensor) -> Tensor:
        """Drop language tokens, reshape to the coarse grid, project, upsample, concat with v."""
        cfg = self.config
        B, L, D = seq.shape
        n = cfg.coarse
        if L != n ** 3 + cfg.lang_tokens:
            raise T.ShapeError(f"restore_volume: sequence length {L} != {n ** 3} + {cfg.lang_tokens}")
        vol = T.reshape(seq[:, :n ** 3, :], (B, n, n, n, D))
        v_pt = T.resize_trilinear(self.restore(vol), v.shape[1:4])
        if cfg.no_skip:
            v = v * 0.0
        return T.concat([v, v_pt], axis=-1)

    def q_heads(self, fused: Tensor) -> QOutputs:
        B = fused.shape[0]
        C = fused.shape[-1]
        q_trans = T.reshape(self.q_trans(fused), fused.shape[:4])
        cm = T.transpose(T.reshape(fused, (B, -1, C)), (0, 2, 1))
        pooled = T.max_(cm, axis=-1)
        ss = T.reshape(_spatial_softmax_cm(cm, fused.shape[1:4]), (B, 3 * C))
        h = self.mlp_1(T.relu(self.mlp_0(T.concat([pooled, ss], axis=-1))))
        R = self.config.r_bins
        return QOutputs(q_trans, T.reshape(h[:, :3 * R], (B, 3, R)), h[:, 3 * R:3 * R + 2], h[:, 3 * R + 2:])

    def forward(self, v: Tensor, proprio, lang) -> QOutputs:
        seq = self.build_sequence(self.condense(v), proprio, lang)
        return self.q_heads(self.restore_volume(self.perceiver(seq), v))


# -- loss and decoding -----------------------------------------------------------------

def _ce(logits: Tensor, target: np.ndarray) -> Tensor:
    """Per-row cross-entropy of (B, K) logits against integer targets (B,)."""
    lp = T.log_softmax(logits, axis=-1)
    return -T.reshape(T.gather(lp, np.asarray(target, dtype=np.int64).reshape(-1, 1), axis=-1), (-1,))


def action_loss(q: QOutputs, targets, reduce: str = "mean") -> Tensor:
    """Sum of the six cross-entropies per sample (translation over all N^3 cells,
    three rotation axes, open, collide), averaged over the batch."""
    targets = [targets] if isinstance(targets, DiscretizedAction) else list(targets)
    B = q.trans.shape[0]
    if len(targets) != B:
        raise T.ShapeError(f"action_loss: {len(targets)} targets for batch of {B}")
    n = q.trans.shape[1:]
    flat = np.array([np.ravel_multi_index(t.trans, n) for t in targets])
    loss = _ce(T.reshape(q.trans, (B, -1)), flat)
    for axis in range(3):
        loss = loss + _ce(q.rot[:, axis, :], np.array([t.rot[axis] for t in targets]))
    loss = loss + _ce(q.open, np.array([t.open for t in targets]))
    loss = loss + _ce(q.collide, np.array([t.collide for t in targets]))
    return T.mean(loss) if reduce == "mean" else loss


def decode_action(q: QOutputs) -> list[DiscretizedAction]:
    """Argmax per head; ties go to the smallest row-major index."""
    out = []
    trans = q.trans.data if isinstance(q.trans, Tensor) else np.asarray(q.trans)
    rot = q.rot.data if isinstance(q.rot, Tensor) else np.asarray(q.rot)
    op = q.open.data if isinstance(q.open, Tensor) else np.asarray(q.open)
    col = q.collide.data if isinstance(q.collide, Tensor) else np.asarray(q.collide)
    for b in range(trans.shape[0]):
        cell = np.unravel_index(int(np.argmax(trans[b])), trans.shape[1:])
        out.append(DiscretizedAction(tuple(int(c) for c in cell), tuple(int(np.argmax(rot[b, a])) for a in range(3)),
                                     int(np.argmax(op[b])), int(np.argmax(col[b]))))
    return out
