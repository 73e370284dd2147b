import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fieldpolicy.demos import (extract_keyframes, keyframe_records, load_dataset, make_training_tuples,
                               proprioception, translate_tuple)
from fieldpolicy.scene import SyntheticDemo, default_cameras, export_dataset, generate_scene, render_views, script_demo


def brute_force_keyframes(vel, opn, eps_v):
    """Frame-by-frame predicate: below-threshold velocity with an unchanged open flag,
    first frame of each run, plus the last frame."""
    keys = []
    prev_flag = False
    for i in range(len(vel)):
        flag = i > 0 and vel[i] < eps_v and opn[i] == opn[i - 1]
        if flag and not prev_flag:
            keys.append(i)
        prev_flag = flag
    if not keys or keys[-1] != len(vel) - 1:
        keys.append(len(vel) - 1)
    return keys


def random_demo(rng, n=None):
    n = n or int(rng.integers(2, 60))
    vel = rng.uniform(0, 0.01, n) * (rng.random(n) < 0.5)
    opn = (np.cumsum(rng.random(n) < 0.1) % 2).astype(int)
    return SyntheticDemo(rng.normal(size=(n, 3)), np.zeros((n, 3)), opn, np.linspace(0, 1, n), vel, "reach")


def test_matches_brute_force_on_100_trajectories():
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = random_demo(rng)
        assert extract_keyframes(d, 1e-3) == brute_force_keyframes(d.joint_vel, d.open, 1e-3)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-4, 1e-2))
def test_keyframe_properties(seed, eps):
    d = random_demo(np.random.default_rng(seed))
    keys = extract_keyframes(d, eps)
    assert keys == sorted(set(keys)) and keys[-1] == len(d) - 1
    assert 0 not in keys or len(d) == 1
    assert keys == extract_keyframes(d, eps)


def test_keyframe_errors_and_gripper_change():
    d = SyntheticDemo(np.zeros((4, 3)), np.zeros((4, 3)), [1, 1, 0, 0], [0, .3, .6, 1], [0.0, 0.0, 0.0, 0.0], "x")
    # frame 2 has zero velocity but the flag changed; frame 3 starts a new run
    assert extract_keyframes(d) == [1, 3]
    with pytest.raises(ValueError):
        extract_keyframes(SyntheticDemo(np.zeros((1, 3)), np.zeros((1, 3)), [1], [0], [0], "x"))
    with pytest.raises(ValueError):
        extract_keyframes(d, 0.0)


def test_keyframe_records_copy_pose():
    d = script_demo(generate_scene(1), "reach-primitive", 0)
    recs = keyframe_records(d, d.keyframes)
    assert [r.index for r in recs] == d.keyframes
    np.testing.assert_array_equal(recs[0].pose, d.poses[d.keyframes[0]])


def _scene_data(seed=0, size=16):
    s = generate_scene(seed)
    return s, render_views(s, default_cameras(3, size)), script_demo(s, "reach-primitive", seed)


def test_training_tuples_use_previous_keyframe():
    s, views, d = _scene_data()
    tups = make_training_tuples(d, d.keyframes, views, s.bounds, 16)
    assert [t.keyframe for t in tups] == d.keyframes
    assert [t.obs_frame for t in tups] == [0] + d.keyframes[:-1]
    np.testing.assert_array_equal(tups[1].proprio, proprioception(d, d.keyframes[0]))
    assert all(t.action.is_valid(16) for t in tups)
    assert tups[0].obs is tups[1].obs  # the static front view is voxelised once


def test_out_of_workspace_keyframe_is_skipped(caplog):
    s, views, d = _scene_data()
    d.poses = d.poses.copy()
    d.poses[d.keyframes[0]] = [5.0, 5.0, 5.0]
    with caplog.at_level(logging.WARNING):
        tups = make_training_tuples(d, d.keyframes, views, s.bounds, 16)
    assert len(tups) == len(d.keyframes) - 1 and "outside the workspace" in caplog.text
    assert tups[0].obs_frame == d.keyframes[0]


def test_translate_tuple_moves_content_and_target():
    s, views, d = _scene_data()
    t = make_training_tuples(d, d.keyframes, views, s.bounds, 16)[0]
    u = translate_tuple(t, [1, -2, 0])
    assert u.action.trans == (t.action.trans[0] + 1, t.action.trans[1] - 2, t.action.trans[2])
    np.testing.assert_array_equal(u.obs.grid[1:, :-2, :, :3], t.obs.grid[:-1, 2:, :, :3])
    assert np.all(u.obs.grid[0] == 0)
    z = translate_tuple(t, [0, 0, 0])
    np.testing.assert_array_equal(z.obs.grid, t.obs.grid)


def test_dataset_round_trip_and_idempotent_extraction(tmp_path):
    s, views, d = _scene_data(3, 8)
    export_dataset([s], [[d]], default_cameras(3, 8), tmp_path)
    loaded = load_dataset(tmp_path)[0]
    d2 = loaded.demos[0]
    np.testing.assert_array_equal(d2.poses, d.poses)
    np.testing.assert_array_equal(d2.joint_vel, d.joint_vel)
    assert extract_keyframes(d2) == extract_keyframes(d2) == d.keyframes
    assert loaded.spec.to_json() == s.to_json()


def test_missing_camera_names_view(tmp_path):
    s, views, d = _scene_data(3, 8)
    export_dataset([s], [[d]], default_cameras(2, 8), tmp_path)
    (tmp_path / "scene_0" / "views" / "1.cam.json").unlink()
    with pytest.raises(FileNotFoundError, match="view 1"):
        load_dataset(tmp_path)


def test_malformed_frames_line_reports_location(tmp_path):
    s, views, d = _scene_data(3, 8)
    export_dataset([s], [[d]], default_cameras(1, 8), tmp_path)
    f = tmp_path / "scene_0" / "demo_0" / "frames.jsonl"
    lines = f.read_text().splitlines()
    lines[2] = "{not json"
    f.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="frames.jsonl:3"):
        load_dataset(tmp_path)
    assert json.loads(lines[0])
