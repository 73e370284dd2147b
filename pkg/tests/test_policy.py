import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp

from fieldpolicy import tensor as T
from fieldpolicy.policy import (Condense, DiscretizedAction, PolicyConfig, PolicyNetwork, QOutputs, action_loss,
                                decode_action, discretize_action, embed_language, rotation_bins, undiscretize_action)

BOUNDS = ((-0.5, -0.5, 0.0), (0.5, 0.5, 1.0))
SMALL = PolicyConfig(grid=8, volume_channels=4, stride=2, d_tok=12, n_latents=6, latent_dim=10, n_blocks=1,
                     n_heads=2, head_dim=4, ff_mult=1, lang_tokens=3, lang_dim=5, pt_channels=4, mlp_hidden=16)


def _inputs(cfg, B=2, seed=0):
    rng = np.random.default_rng(seed)
    v = T.Tensor(rng.normal(size=(B, cfg.grid, cfg.grid, cfg.grid, cfg.volume_channels)))
    proprio = rng.normal(size=(B, 4))
    lang = rng.normal(size=(B, cfg.lang_tokens, cfg.lang_dim))
    return v, proprio, lang


def _zero_q(B, n, R=72):
    return QOutputs(T.Tensor(np.zeros((B, n, n, n))), T.Tensor(np.zeros((B, 3, R))), T.Tensor(np.zeros((B, 2))),
                    T.Tensor(np.zeros((B, 2))))


def test_output_shapes():
    with T.default_dtype(np.float64):
        net = PolicyNetwork(SMALL, np.random.default_rng(0))
        q = net(*_inputs(SMALL))
    assert q.trans.shape == (2, 8, 8, 8)
    assert q.rot.shape == (2, 3, 72) and q.open.shape == (2, 2) and q.collide.shape == (2, 2)
    assert SMALL.n_tokens == 4 ** 3 + 3


def test_full_scale_token_count():
    assert PolicyConfig.full_scale().n_tokens == 8077 and PolicyConfig.full_scale().coarse == 20


def test_uniform_logits_loss():
    n = 4
    tgt = DiscretizedAction((1, 2, 3), (0, 71, 5), 1, 0)
    got = action_loss(_zero_q(1, n), [tgt]).data
    assert got == pytest.approx(np.log(n ** 3) + 3 * np.log(72) + 2 * np.log(2), rel=1e-12)


def test_two_way_uniform_is_ln2():
    q = _zero_q(1, 2)
    per = action_loss(q, [DiscretizedAction((0, 0, 0), (0, 0, 0), 0, 1)], reduce="none").data
    assert per[0] - np.log(8) - 3 * np.log(72) == pytest.approx(2 * np.log(2))


def test_action_loss_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    B, n = 3, 3
    q = QOutputs(T.Tensor(rng.normal(size=(B, n, n, n))), T.Tensor(rng.normal(size=(B, 3, 72))),
                 T.Tensor(rng.normal(size=(B, 2))), T.Tensor(rng.normal(size=(B, 2))))
    tg = [DiscretizedAction(tuple(rng.integers(0, n, 3)), tuple(rng.integers(0, 72, 3)), int(rng.integers(2)),
                            int(rng.integers(2))) for _ in range(B)]
    ref = 0.0
    for b, t in enumerate(tg):
        flat = q.trans.data[b].reshape(-1)
        ref += logsumexp(flat) - flat[np.ravel_multi_index(t.trans, (n, n, n))]
        for a in range(3):
            ref += logsumexp(q.rot.data[b, a]) - q.rot.data[b, a, t.rot[a]]
        ref += logsumexp(q.open.data[b]) - q.open.data[b, t.open]
        ref += logsumexp(q.collide.data[b]) - q.collide.data[b, t.collide]
    assert action_loss(q, tg).data == pytest.approx(ref / B, rel=1e-12)


def test_action_loss_rejects_wrong_batch():
    with pytest.raises(T.ShapeError):
        action_loss(_zero_q(2, 2), [DiscretizedAction((0, 0, 0), (0, 0, 0), 0, 0)])


def test_decode_ties_go_to_first_index():
    a = decode_action(_zero_q(1, 3))[0]
    assert a == DiscretizedAction((0, 0, 0), (0, 0, 0), 0, 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_decode_invariant_to_logit_shift(seed, c):
    rng = np.random.default_rng(seed)
    arrs = [rng.normal(size=(1, 3, 3, 3)), rng.normal(size=(1, 3, 72)), rng.normal(size=(1, 2)), rng.normal(size=(1, 2))]
    a = decode_action(QOutputs(*arrs))
    b = decode_action(QOutputs(*[x + c for x in arrs]))
    assert a == b


def test_discretize_examples():
    a = discretize_action([0.0, 0.0, 0.5], [0.0, 180.0, -5.0], 1, 0, BOUNDS, 100)
    assert a.trans == (50, 50, 50)
    assert a.rot == (0, 36, 71)
    assert a.is_valid(100)
    assert rotation_bins() == 72
    assert not DiscretizedAction((100, 0, 0), (0, 0, 0), 0, 0).is_valid(100)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 0.999), min_size=3, max_size=3), st.lists(st.floats(-720, 720), min_size=3, max_size=3))
def test_undiscretize_within_half_cell_and_half_bin(u, euler):
    lo, hi = np.asarray(BOUNDS[0]), np.asarray(BOUNDS[1])
    pose = lo + np.asarray(u) * (hi - lo)
    a = discretize_action(pose, euler, 1, 1, BOUNDS, 32)
    assert a.is_valid(32)
    p, e, _, _ = undiscretize_action(a, BOUNDS, 32)
    assert np.all(np.abs(p - pose) <= 0.5 * (hi - lo) / 32 + 1e-12)
    diff = (e - np.mod(euler, 360.0) + 180) % 360 - 180
    assert np.all(np.abs(diff) <= 2.5 + 1e-9)
    assert discretize_action(p, e, 1, 1, BOUNDS, 32) == a


def test_language_embedding():
    a, b = embed_language("reach the primitive"), embed_language("reach the primitive")
    assert a.tokens.shape == (16, 32)
    np.testing.assert_array_equal(a.tokens, b.tokens)
    assert not np.array_equal(a.tokens, embed_language("push the primitive").tokens)
    with pytest.raises(ValueError):
        embed_language("")


def test_condense_shape_and_indivisible_extent():
    c = Condense(3, 5, np.random.default_rng(0))
    assert c(T.Tensor(np.zeros((1, 10, 10, 10, 3)))).shape == (1, 2, 2, 2, 3)
    with pytest.raises(T.ShapeError, match="pad"):
        c(T.Tensor(np.zeros((1, 12, 12, 12, 3))))


def test_no_skip_removes_direct_volume_path():
    import dataclasses

    with T.default_dtype(np.float64):
        net = PolicyNetwork(dataclasses.replace(SMALL, no_skip=True), np.random.default_rng(0))
        v, proprio, lang = _inputs(SMALL)
        seq = net.perceiver(net.build_sequence(net.condense(v), proprio, lang))
        fused = net.restore_volume(seq, v)
    C = SMALL.volume_channels
    assert np.all(fused.data[..., :C] == 0)
    assert fused.shape[-1] == C + SMALL.pt_channels


def test_attention_rows_are_distributions():
    with T.default_dtype(np.float64):
        net = PolicyNetwork(SMALL, np.random.default_rng(1))
        net(*_inputs(SMALL))
    maps = net.perceiver.attention_maps()
    assert maps
    for w in maps.values():
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_end_to_end_action_loss_gradcheck():
    from fieldpolicy.checks import policy_suite

    res = policy_suite()
    for name in ("condense", "perceiver", "action_loss_fused_volume", "action_loss_end_to_end"):
        assert res[name] <= 1e-4, (name, res[name])
