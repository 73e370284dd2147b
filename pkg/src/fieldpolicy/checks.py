"""Gradient-check suites and the full-scale shape dry run, shared by tests and the CLI."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, VoxelEncoder, parameter_count
from .gnf import GNF, GNFConfig, FieldNetwork, Rays, VolumeField, field_eval, positional_encoding, recon_loss, \
    render_rays
from .policy import (Condense, DiscretizedAction, Perceiver, PolicyConfig, PolicyNetwork, QOutputs, action_loss,
                     embed_language)
from .voxelizer import sample_trilinear

TOLERANCE = 1e-4


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return T.Tensor(rng.uniform(lo, hi, size=shape))


def ops_suite(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error of every primitive op on random float64 inputs."""
    rng = np.random.default_rng(seed)
    r = {}
    with T.default_dtype(np.float64):
        a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
        r["add"] = T.gradcheck(lambda x, y: T.sum_(T.square(x + y)), [a, b])
        r["sub"] = T.gradcheck(lambda x, y: T.sum_(T.square(x - y)), [_rand(rng, 3, 4), _rand(rng, 4)])
        r["mul"] = T.gradcheck(lambda x, y: T.sum_(x * y * x), [_rand(rng, 3, 4), _rand(rng, 1, 4)])
        r["div"] = T.gradcheck(lambda x, y: T.sum_(x / y), [_rand(rng, 3, 4), _rand(rng, 3, 4, lo=0.5, hi=2.0)])
        r["power"] = T.gradcheck(lambda x: T.sum_(T.power(x, 1.5)), [_rand(rng, 5, lo=0.5, hi=2.0)])
        r["sqrt"] = T.gradcheck(lambda x: T.sum_(T.sqrt(x)), [_rand(rng, 5, lo=0.5, hi=2.0)])
        r["exp"] = T.gradcheck(lambda x: T.sum_(T.exp(x)), [_rand(rng, 6)])
        r["log"] = T.gradcheck(lambda x: T.sum_(T.log(x)), [_rand(rng, 6, lo=0.5, hi=3.0)])
        r["sin_cos"] = T.gradcheck(lambda x: T.sum_(T.sin(x) * T.cos(x)), [_rand(rng, 6)])
        r["matmul"] = T.gradcheck(lambda x, y: T.sum_(T.square(T.matmul(x, y))), [_rand(rng, 2, 3), _rand(rng, 3, 4)])
        r["batched_matmul"] = T.gradcheck(lambda x, y: T.sum_(T.square(T.matmul(x, y))),
                                          [_rand(rng, 2, 2, 3), _rand(rng, 2, 3, 2)])
        r["linear"] = T.gradcheck(lambda x, w, c: T.sum_(T.square(T.linear(x, w, c))),
                                  [_rand(rng, 2, 3, 4), _rand(rng, 4, 5), _rand(rng, 5)])
        r["relu"] = T.gradcheck(lambda x: T.sum_(T.square(T.relu(x))), [_rand(rng, 8)], retries=3, rng=rng)
        r["leaky_relu"] = T.gradcheck(lambda x: T.sum_(T.square(T.leaky_relu(x, 0.02))), [_rand(rng, 8)],
                                      retries=3, rng=rng)
        r["sigmoid"] = T.gradcheck(lambda x: T.sum_(T.sigmoid(x) * x), [_rand(rng, 6, lo=-4, hi=4)])
        r["softplus"] = T.gradcheck(lambda x: T.sum_(T.softplus(x) * x), [_rand(rng, 6, lo=-4, hi=4)])
        r["tanh"] = T.gradcheck(lambda x: T.sum_(T.tanh(x) * x), [_rand(rng, 6)])
        r["gelu"] = T.gradcheck(lambda x: T.sum_(T.gelu(x) * x), [_rand(rng, 6, lo=-3, hi=3)])
        w = rng.normal(size=(3, 5))
        r["softmax"] = T.gradcheck(lambda x: T.sum_(T.softmax(x, axis=-1) * w), [_rand(rng, 3, 5)])
        r["softmax_axis0"] = T.gradcheck(lambda x: T.sum_(T.softmax(x, axis=0) * w), [_rand(rng, 3, 5)])
        r["log_softmax"] = T.gradcheck(lambda x: T.sum_(T.log_softmax(x, axis=-1) * w), [_rand(rng, 3, 5)])
        r["sum_mean"] = T.gradcheck(lambda x: T.sum_(T.square(T.sum_(x, axis=0))) + T.mean(T.square(x)),
                                    [_rand(rng, 3, 4)])
        r["max"] = T.gradcheck(lambda x: T.sum_(T.square(T.max_(x, axis=1))), [_rand(rng, 3, 4)])
        r["cumsum_exclusive"] = T.gradcheck(lambda x: T.sum_(T.exp(-T.cumsum_exclusive(x, axis=-1))),
                                            [_rand(rng, 2, 5)])
        r["concat_reshape"] = T.gradcheck(
            lambda x, y: T.sum_(T.square(T.reshape(T.concat([x, y], axis=1), (-1,))) * np.arange(12.0)),
            [_rand(rng, 2, 2), _rand(rng, 2, 4)])
        r["transpose_getitem"] = T.gradcheck(lambda x: T.sum_(T.square(T.transpose(x, (1, 0))[1:, ::2])),
                                             [_rand(rng, 3, 4)])
        idx = np.array([[2, 0], [1, 1], [3, 0]])
        r["gather"] = T.gradcheck(lambda x: T.sum_(T.square(T.gather(x, idx, axis=1))), [_rand(rng, 3, 4)])
        r["broadcast_to"] = T.gradcheck(lambda x: T.sum_(T.square(T.broadcast_to(x, (3, 4))) * w[:, :4]),
                                        [_rand(rng, 1, 4)])
        for stride in (1, 2):
            for cin, cout in ((2, 3), (3, 2)):
                r[f"conv3d_s{stride}_{cin}to{cout}"] = T.gradcheck(
                    lambda x, k, c: T.sum_(T.square(T.conv3d(x, k, c, stride=stride, padding=1))),
                    [_rand(rng, 1, 4, 4, 3, cin), _rand(rng, 3, 3, 3, cin, cout), _rand(rng, cout)])
        r["resize_trilinear"] = T.gradcheck(
            lambda x: T.sum_(T.square(T.resize_trilinear(x, (4, 3, 5)))), [_rand(rng, 1, 2, 3, 2, 2)])
        r["upsample_identity"] = T.gradcheck(
            lambda x: T.sum_(T.square(T.resize_trilinear(x, (2, 3, 2)))), [_rand(rng, 1, 2, 3, 2, 2)])
        pts = rng.uniform(0.05, 0.95, size=(6, 3))
        r["grid_sample_volume"] = T.gradcheck(lambda v: T.sum_(T.square(T.grid_sample(v, pts))),
                                              [_rand(rng, 1, 3, 3, 3, 2)])
        vol = rng.uniform(-1, 1, size=(1, 3, 3, 3, 2))
        r["grid_sample_points"] = T.gradcheck(lambda p: T.sum_(T.square(T.grid_sample(T.Tensor(vol), p))),
                                              [T.Tensor(rng.uniform(0.2, 0.8, size=(4, 3)))], retries=3, rng=rng)
    return r


def _toy_rays(rng, n_rays=2):
    o = np.tile(np.array([[0.0, -1.0, 0.5]]), (n_rays, 1)) + rng.uniform(-0.05, 0.05, size=(n_rays, 3))
    d = np.array([[0.0, 1.0, 0.0]]) + rng.uniform(-0.1, 0.1, size=(n_rays, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return Rays(o, d, np.full(n_rays, 0.6), np.full(n_rays, 1.4))


def render_suite(seed: int = 0) -> dict[str, float]:
    """Gradient checks of sampling, the field network and the rendering loss."""
    rng = np.random.default_rng(seed)
    bounds = ((-0.5, -0.5, 0.0), (0.5, 0.5, 1.0))
    r = {}
    with T.default_dtype(np.float64):
        pts = rng.uniform(-0.6, 0.6, size=(10, 3)) + np.array([0.0, 0.0, 0.5])
        r["sample_trilinear"] = T.gradcheck(lambda v: T.sum_(T.square(sample_trilinear(v, pts, bounds))),
                                            [_rand(rng, 4, 4, 4, 3)])
        r["positional_encoding"] = T.gradcheck(lambda p: T.sum_(positional_encoding(p) * 0.5),
                                               [_rand(rng, 3, 3, lo=0, hi=1)])
        cfg = GNFConfig(volume_channels=3, hidden=8, n_blocks=2, feat_dim=4)
        net = FieldNetwork(cfg, rng)
        x, d, vx = _rand(rng, 2, 3, lo=0, hi=1), _rand(rng, 2, 3), _rand(rng, 2, 3)

        def fe(*params):
            s, c, f = field_eval(net, x, d, vx)
            return T.sum_(T.square(s)) + T.sum_(c * 0.7) + T.sum_(T.square(f))

        r["field_eval"] = T.gradcheck(fe, net.parameters() + [vx], retries=2, rng=rng)

        sig = rng.uniform(0.2, 3.0, size=4)
        col = rng.uniform(0, 1, size=(4, 3))

        class Toy:
            def __call__(self, p, dd, b=None):
                return self.sigma, T.Tensor(col), T.Tensor(col[:, :2])

        toy = Toy()
        ray1 = Rays(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), np.array([0.0]), np.array([1.0]))
        depths = np.array([[0.1, 0.35, 0.6, 0.85]])

        def quad(s):
            toy.sigma = s
            out = render_rays(toy, ray1, depths)
            return T.sum_(T.square(out.rgb - 0.3)) + T.sum_(out.depth) + T.sum_(T.square(out.feat))

        r["quadrature_4_samples"] = T.gradcheck(quad, [T.Tensor(sig)])

        gcfg = GNFConfig(volume_channels=3, hidden=8, n_blocks=1, feat_dim=4)
        gnet = FieldNetwork(gcfg, rng)
        rays = _toy_rays(rng)
        t = np.sort(rng.uniform(0.6, 1.4, size=(2, 8)), axis=1)
        gt_rgb, gt_feat = rng.uniform(0, 1, size=(2, 3)), rng.normal(size=(2, 4))

        def rl(vol):
            out = render_rays(VolumeField(gnet, vol, bounds), rays, t)
            pred = out.rgb + T.reshape(1.0 - out.acc, (-1, 1)) * T.Tensor(np.ones((1, 3)))
            return recon_loss(pred, out.feat, gt_rgb, gt_feat, 0.5)[0]

        r["render_recon_loss_volume"] = T.gradcheck(rl, [_rand(rng, 1, 4, 4, 4, 3)])
    return r


def policy_suite(seed: int = 0) -> dict[str, float]:
    """Gradient checks of the encoder, condense, transformer and action loss."""
    rng = np.random.default_rng(seed)
    r = {}
    with T.default_dtype(np.float64):
        enc = VoxelEncoder(EncoderConfig(widths=(2, 2, 2, 2), out_channels=2), rng)
        r["encoder"] = T.gradcheck(lambda x, *p: T.sum_(T.square(enc(x))),
                                   [_rand(rng, 1, 6, 6, 6, 10), enc.conv0.conv.weight, enc.conv_out.bias,
                                    enc.conv6.norm.scale], retries=2, rng=rng)
        cond = Condense(2, 5, rng)
        r["condense"] = T.gradcheck(lambda v, *p: T.sum_(T.square(cond(v))),
                                    [_rand(rng, 1, 5, 5, 5, 2), cond.conv.bias], retries=2, rng=rng)
        per = Perceiver(d_tok=4, n_latents=2, latent_dim=4, n_blocks=1, n_heads=2, head_dim=2, ff_mult=1, rng=rng)
        r["perceiver"] = T.gradcheck(lambda s, *p: T.sum_(T.square(per(s))),
                                     [_rand(rng, 1, 4, 4), per.latents, per.encode.attn.to_q.weight])
        pcfg = PolicyConfig(grid=4, volume_channels=2, stride=2, d_tok=4, n_latents=2, latent_dim=4, n_blocks=1,
                            n_heads=1, head_dim=2, ff_mult=1, lang_tokens=2, lang_dim=3, pt_channels=2,
                            mlp_hidden=4, rot_resolution=60.0)
        pol = PolicyNetwork(pcfg, rng)
        y = DiscretizedAction((1, 2, 3), (0, 5, 2), 1, 0)
        lang = embed_language("reach the primitive", 2, 3).tokens[None]
        fused = _rand(rng, 1, 4, 4, 4, 4)
        r["action_loss_fused_volume"] = T.gradcheck(lambda f: action_loss(pol.q_heads(f), [y]), [fused],
                                                    retries=2, rng=rng)
        r["action_loss_end_to_end"] = T.gradcheck(
            lambda v, *p: action_loss(pol(v, np.array([[1.0, 1.0, 1.0, 0.5]]), lang), [y]),
            [_rand(rng, 1, 4, 4, 4, 2), pol.condense.conv.bias, pol.restore.weight, pol.mlp_1.bias],
            retries=2, rng=rng)
    return r


SUITES = {"ops": ops_suite, "render": render_suite, "policy": policy_suite}


# -- full-scale shape dry run ---------------------------------------------------------------

def shapecheck_full_scale(log=print) -> list[tuple[str, object, object, bool]]:
    """Build the full-scale modules and push zero inputs through them without training.

    Returns (name, expected, observed, ok) rows.
    """
    rows = []

    def check(name, expected, observed):
        ok = expected == observed if not callable(expected) else expected(observed)
        rows.append((name, expected.__doc__ if callable(expected) else expected, observed, bool(ok)))
        log(f"{'PASS' if ok else 'FAIL'} {name}: expected {rows[-1][1]}, got {observed}")

    rng = np.random.default_rng(0)
    ecfg = EncoderConfig.full_scale()
    n_params = parameter_count(ecfg)

    def in_range(x):
        """within [200000, 400000]"""
        return 200_000 <= x <= 400_000

    check("encoder parameter count", in_range, n_params)
    pcfg = PolicyConfig.full_scale()
    gcfg = GNFConfig.full_scale()
    with T.no_grad(), T.default_dtype(np.float32):
        enc = VoxelEncoder(ecfg, rng)
        check("encoder parameter count (instantiated)", n_params, enc.num_parameters())
        x = T.Tensor(np.zeros((1, 100, 100, 100, 10), dtype=np.float32))
        check("observation grid", (1, 100, 100, 100, 10), x.shape)
        shapes = enc.stage_shapes(x)
        check("encoder stage conv2", (1, 50, 50, 50, 16), shapes["conv2"])
        check("encoder stage conv4", (1, 25, 25, 25, 32), shapes["conv4"])
        check("encoder stage conv6", (1, 13, 13, 13, 64), shapes["conv6"])
        del shapes
        v = enc(x)
        del x, enc
        check("feature volume", (1, 100, 100, 100, 128), v.shape)
        pol = PolicyNetwork(pcfg, rng)
        coarse = pol.condense(v)
        check("condensed volume", (1, 20, 20, 20, 128), coarse.shape)
        B = 1
        prop = pol.proprio(T.Tensor(np.zeros((B, 4), dtype=np.float32)))
        tokens = T.concat([T.reshape(coarse, (B, 8000, 128)),
                           T.broadcast_to(T.reshape(prop, (B, 1, -1)), (B, 8000, prop.shape[-1]))], axis=-1)
        check("volume + proprio tokens", (1, 8000, 256), tokens.shape)
        lang = embed_language("reach the primitive", pcfg.lang_tokens, pcfg.lang_dim)
        check("language tokens", (77, 512), lang.tokens.shape)
        seq = pol.build_sequence(coarse, np.zeros((B, 4)), lang.tokens[None])
        check("token sequence", (1, 8077, 256), seq.shape)
        out = pol.perceiver(seq)
        check("transformer output", (1, 8077, 256), out.shape)
        grid = T.reshape(out[:, :8000, :], (B, 20, 20, 20, 256))
        check("reshaped volume tokens", (1, 20, 20, 20, 256), grid.shape)
        v_pt = T.resize_trilinear(pol.restore(grid), (100, 100, 100))
        check("upsampled transformer volume", (1, 100, 100, 100, 128), v_pt.shape)
        del v_pt, grid, out, seq
        net = FieldNetwork(gcfg, rng)
        check("field input width", 170, gcfg.input_dim)
        check("field first layer input", 170, net.fc_in.weight.shape[0])
        check("field output width", 516, net.fc_out.weight.shape[1])
        s, c, f = field_eval(net, np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 128)))
        check("field outputs (sigma, rgb, feature)", ((2,), (2, 3), (2, 512)), (s.shape, c.shape, f.shape))
        del v
    return rows
