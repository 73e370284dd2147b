import json

import numpy as np
import pytest

from fieldpolicy import gnft
from fieldpolicy.demos import extract_keyframes, load_dataset
from fieldpolicy.scene import (CameraModel, Primitive, SceneConfig, SceneSpec, default_cameras, export_dataset,
                               generate_scene, look_at, render_analytic, render_rays_analytic, replace_scene,
                               script_demo)


def _box(center, half, density, color, feat_dim=4, axis=0):
    f = np.zeros(feat_dim)
    f[axis] = 1.0
    return Primitive("box", center, half, density, color, f)


def test_generate_scene_deterministic_and_seed_sensitive():
    a, b = generate_scene(0), generate_scene(0)
    assert a.to_json() == b.to_json()
    assert generate_scene(1).to_json() != generate_scene(2).to_json()


def test_generated_primitives_inside_bounds_with_unit_features():
    cfg = SceneConfig(min_primitives=1, max_primitives=3)
    for seed in range(20):
        s = generate_scene(seed, cfg)
        for p in s.primitives:
            assert np.all(p.center - p.half_extent >= s.lo - 1e-12)
            assert np.all(p.center + p.half_extent <= s.hi + 1e-12)
            assert np.linalg.norm(p.feature) == pytest.approx(1.0)


def test_replace_scene_moves_only_floor_placement():
    cfg = SceneConfig(min_primitives=1, max_primitives=3)
    for seed in range(20):
        a = generate_scene(seed, cfg)
        b = replace_scene(a, 100 + seed)
        assert replace_scene(a, 100 + seed).to_json() == b.to_json()
        for p, q in zip(a.primitives, b.primitives, strict=True):
            assert p.kind == q.kind and p.density == q.density
            np.testing.assert_array_equal(p.size, q.size)
            np.testing.assert_array_equal(p.feature, q.feature)
            assert q.center[2] == p.center[2] and not np.array_equal(q.center[:2], p.center[:2])
            assert np.all(q.center - q.half_extent >= b.lo - 1e-12)
            assert np.all(q.center + q.half_extent <= b.hi + 1e-12)


def test_zero_primitives_and_bad_feat_dim():
    s = generate_scene(0, SceneConfig(min_primitives=0, max_primitives=0))
    assert s.primitives == []
    with pytest.raises(ValueError):
        generate_scene(0, SceneConfig(feat_dim=0))


def test_empty_scene_renders_background_at_far():
    s = generate_scene(0, SceneConfig(min_primitives=0, max_primitives=0))
    cam = default_cameras(1, 8)[0]
    rgb, depth, feat = render_analytic(s, cam)
    np.testing.assert_allclose(rgb, 1.0)
    np.testing.assert_allclose(depth, cam.far)
    np.testing.assert_allclose(feat, 0.0)


def test_unit_box_closed_form():
    # ray along +x crossing a sigma=1 red box over exactly one unit of length
    s = SceneSpec([_box([0.5, 0.0, 0.0], [0.5, 1.0, 1.0], 1.0, [1, 0, 0])], bounds=((-1, -1, -1), (2, 1, 1)),
                  background=[0.2, 0.4, 0.6], feat_dim=4)
    rgb, depth, feat, acc = render_rays_analytic(s, [[-0.5, 0, 0]], [[1.0, 0, 0]], 0.5, 1.5)
    np.testing.assert_allclose(rgb[0], [1 - np.exp(-1), 0, 0], rtol=1e-14)
    composite = rgb[0] + (1 - acc[0]) * s.background
    np.testing.assert_allclose(composite, [1 - np.exp(-1) + np.exp(-1) * 0.2, np.exp(-1) * 0.4, np.exp(-1) * 0.6])
    # depth: weight (1 - e^-1) at the segment midpoint plus residual at t_f
    assert depth[0] == pytest.approx((1 - np.exp(-1)) * 1.0 + np.exp(-1) * 1.5)


def test_first_of_two_primitives_feature():
    s = SceneSpec([_box([0.0, 0.0, 0.0], [0.1, 0.1, 0.1], 5.0, [1, 0, 0], axis=0),
                   _box([0.0, 0.6, 0.0], [0.1, 0.1, 0.1], 7.0, [0, 1, 0], axis=1)],
                  bounds=((-1, -1, -1), (1, 1, 1)), feat_dim=4)
    rgb, depth, feat, acc = render_rays_analytic(s, [[-1.0, 0, 0]], [[1.0, 0, 0]], 0.1, 3.0)
    expected = (1 - np.exp(-5.0 * 0.2)) * np.array([1.0, 0, 0, 0])
    np.testing.assert_allclose(feat[0], expected, atol=1e-14)


def test_overlap_sums_density_and_weights_colour():
    s = SceneSpec([_box([0, 0, 0], [0.2] * 3, 2.0, [1, 0, 0]), _box([0, 0, 0], [0.2] * 3, 6.0, [0, 0, 1])],
                  bounds=((-1, -1, -1), (1, 1, 1)), feat_dim=4)
    sigma, c, f = s.query(np.zeros((1, 3)))
    assert sigma[0] == 8.0
    np.testing.assert_allclose(c[0], [0.25, 0, 0.75])


def test_accumulated_weight_in_unit_interval():
    s = generate_scene(4, SceneConfig(min_primitives=2, max_primitives=3))
    for cam in default_cameras(3, 12):
        from fieldpolicy.scene import camera_rays
        o, d = camera_rays(cam)
        acc = render_rays_analytic(s, o, d, cam.near, cam.far)[3]
        assert np.all(acc >= 0) and np.all(acc <= 1)


def test_camera_invariants():
    with pytest.raises(ValueError):
        CameraModel(10, 10, 4, 4, 8, 8, np.diag([2.0, 1, 1, 1]), 0.1, 1.0)
    with pytest.raises(ValueError):
        CameraModel(10, 10, 4, 4, 8, 8, np.eye(4), 1.0, 0.5)
    c2w = look_at([1, 2, 3], [0, 0, 0])
    np.testing.assert_allclose(c2w[:3, :3].T @ c2w[:3, :3], np.eye(3), atol=1e-12)


def test_feature_image_invariant_to_camera_roll():
    s = generate_scene(2)
    c2w = look_at([0, -1.6, 0.6], [0, 0, 0.2])
    roll = np.eye(4)
    roll[:2, :2] = [[0, -1], [1, 0]]  # 90 degree roll about the optical axis
    a = CameraModel(20, 20, 8, 8, 16, 16, c2w, 0.5, 3.0)
    b = CameraModel(20, 20, 8, 8, 16, 16, c2w @ roll, 0.5, 3.0)
    fa, fb = render_analytic(s, a)[2], render_analytic(s, b)[2]
    # the pixel grid is symmetric about the principal point, so a 90 degree roll permutes pixels
    np.testing.assert_allclose(np.rot90(fa, k=1), fb, atol=1e-12)


def test_script_demo_reach_keyframes_and_determinism():
    s = generate_scene(3)
    d1, d2 = script_demo(s, "reach-primitive", 7), script_demo(s, "reach-primitive", 7)
    np.testing.assert_array_equal(d1.poses, d2.poses)
    assert len(d1.keyframes) >= 2
    assert d1.keyframes == extract_keyframes(d1)
    assert np.all(np.diff(d1.timesteps) > 0)
    # grasp: the open flag toggles once, from open to closed
    assert list(np.nonzero(np.diff(d1.open))[0]) == [len(d1) - 3]
    assert d1.actions[-1].open == 0 and d1.actions[0].collide == 1 and d1.actions[1].collide == 0


def test_script_demo_push_and_unknown_task():
    s = generate_scene(3)
    d = script_demo(s, "push-primitive-to-target", 1)
    assert len(d.keyframes) >= 2 and np.all(d.open == 0)
    with pytest.raises(ValueError):
        script_demo(s, "juggle", 0)


def test_single_dip_velocity_profile():
    from fieldpolicy.scene import SyntheticDemo

    d = SyntheticDemo(np.zeros((4, 3)), np.zeros((4, 3)), [1, 1, 1, 1], [0, 0.3, 0.6, 1.0], [0.2, 0.2, 0.0, 0.2],
                      "reach the primitive")
    keys = extract_keyframes(d, 1e-3)
    assert [k for k in keys if k != len(d) - 1] == [2]


def test_export_layout_and_round_trip(tmp_path):
    s = generate_scene(0)
    demo = script_demo(s, "reach-primitive", 0)
    cams = default_cameras(3, 8)
    export_dataset([s], [[demo]], cams, tmp_path / "a")
    vdir = tmp_path / "a" / "scene_0" / "views"
    for kind in ("rgb", "depth", "feat"):
        assert len(list(vdir.glob(f"*.{kind}.gnft"))) == 3
    assert len(list(vdir.glob("*.cam.json"))) == 3
    assert gnft.load(vdir / "0.feat.gnft").shape == (8, 8, s.feat_dim)
    cam = json.loads((vdir / "1.cam.json").read_text())
    assert set(cam) == {"fx", "fy", "cx", "cy", "H", "W", "near", "far", "c2w"} and len(cam["c2w"]) == 16
    lines = (tmp_path / "a" / "scene_0" / "demo_0" / "frames.jsonl").read_text().splitlines()
    assert len(lines) == len(demo)
    assert {"pose", "euler", "open", "timestep", "joint_vel"} <= set(json.loads(lines[0]))

    loaded = load_dataset(tmp_path / "a")
    from fieldpolicy.scene import write_scene
    write_scene(tmp_path / "b", 0, loaded[0].spec, loaded[0].views, loaded[0].demos)
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            g = tmp_path / "b" / f.relative_to(tmp_path / "a")
            assert g.read_bytes() == f.read_bytes(), f


def test_export_reports_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        export_dataset([generate_scene(0)], [[]], default_cameras(1, 4), blocker)
