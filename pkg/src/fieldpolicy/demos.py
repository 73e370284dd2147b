"""Demonstration loading, keyframe extraction and supervised training tuples."""
from __future__ import annotations

import dataclasses
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gnft
from .policy import DiscretizedAction, LanguageEmbedding, discretize_action, embed_language
from .scene import CameraModel, SceneSpec, SyntheticDemo
from .voxelizer import ObservationVoxel, in_bounds, voxelize

log = logging.getLogger(__name__)

DEFAULT_EPS_V = 1e-3


def extract_keyframes(demo: SyntheticDemo, eps_v: float = DEFAULT_EPS_V) -> list[int]:
    """Frames where the joint velocity is below ``eps_v`` and the open flag equals
    the previous frame's; only the first frame of each flagged run is kept and the
    final frame is always included.  Frame 0 has no predecessor and is never flagged."""
    if eps_v <= 0:
        raise ValueError("eps_v must be positive")
    n = len(demo)
    if n < 2:
        raise ValueError(f"demo needs at least 2 frames, got {n}")
    vel = np.asarray(demo.joint_vel)
    opn = np.asarray(demo.open)
    flagged = np.zeros(n, dtype=bool)
    flagged[1:] = (vel[1:] < eps_v) & (opn[1:] == opn[:-1])
    starts = flagged & ~np.concatenate([[False], flagged[:-1]])
    keys = [int(i) for i in np.nonzero(starts)[0]]
    if not keys or keys[-1] != n - 1:
        keys.append(n - 1)
    return keys


@dataclass
class Keyframe:
    index: int
    pose: np.ndarray
    euler: np.ndarray
    open: int
    collide: int
    demo_id: int = 0


def keyframe_records(demo: SyntheticDemo, keyframes: list[int], demo_id: int = 0) -> list[Keyframe]:
    return [Keyframe(k, demo.poses[k].copy(), demo.eulers[k].copy(), int(demo.open[k]), int(demo.collide[k]), demo_id)
            for k in keyframes]


def proprioception(demo: SyntheticDemo, frame: int) -> np.ndarray:
    """(open, finger 1, finger 2, timestep); both fingers mirror the open flag."""
    o = float(demo.open[frame])
    return np.array([o, o, o, float(demo.timesteps[frame])])


@dataclass
class TrainingTuple:
    obs: ObservationVoxel
    lang: LanguageEmbedding
    proprio: np.ndarray  # (4,)
    action: DiscretizedAction
    keyframe: int
    obs_frame: int
    scene_id: int = 0
    demo_id: int = 0


def make_training_tuples(demo: SyntheticDemo, keyframes: list[int], views, bounds, n: int,
                         front: int = 0, lang_tokens: int = 16, lang_dim: int = 32,
                         frame_views: dict | None = None, scene_id: int = 0, demo_id: int = 0,
                         voxel_cache: dict | None = None) -> list[TrainingTuple]:
    """One tuple per keyframe: observation at the previous keyframe (frame 0 for the
    first) and the discretised pose of the keyframe as target.

    The observation is the front view ``views[front]`` unless ``frame_views`` maps a
    frame index to its own {rgb, depth, cam} view.
    """
    lang = embed_language(demo.task, lang_tokens, lang_dim)
    cache = {} if voxel_cache is None else voxel_cache
    out = []
    prev = 0
    for k in keyframes:
        pose = demo.poses[k]
        if not in_bounds(pose[None], bounds)[0]:
            log.warning("keyframe %d of demo %d lies outside the workspace; skipped", k, demo_id)
            prev = k
            continue
        view = frame_views.get(prev) if frame_views else None
        key = ("frame", prev) if view is not None else ("static", front)
        if key not in cache:
            v = view if view is not None else views[front]
            cache[key] = voxelize(v["rgb"], v["depth"], v["cam"], bounds, n)
        action = discretize_action(pose, demo.eulers[k], demo.open[k], demo.collide[k], bounds, n)
        out.append(TrainingTuple(cache[key], lang, proprioception(demo, prev), action, k, prev, scene_id, demo_id))
        prev = k
    return out


def translate_tuple(tup: TrainingTuple, shift) -> TrainingTuple:
    """The same tuple with the whole scene moved by an integer number of cells.

    Voxel contents move with zero fill, stored world coordinates and
    normalised indices follow, and the target cell moves by ``shift``.
    """
    shift = np.asarray(shift, dtype=np.int64)
    grid = tup.obs.grid
    n = grid.shape[0]
    out = np.zeros_like(grid)
    src, dst = [], []
    for s in shift:
        src.append(slice(max(0, -s), n - max(0, s)))
        dst.append(slice(max(0, s), n - max(0, -s)))
    out[tuple(dst)] = grid[tuple(src)]
    occ = out[..., 9] > 0
    lo, hi = np.asarray(tup.obs.bounds[0]), np.asarray(tup.obs.bounds[1])
    out[occ, 3:6] += (shift * (hi - lo) / n).astype(grid.dtype)
    out[occ, 6:9] += (shift / (n - 1)).astype(grid.dtype)
    a = tup.action
    action = DiscretizedAction(tuple(int(t + s) for t, s in zip(a.trans, shift)), a.rot, a.open, a.collide)
    return dataclasses.replace(tup, obs=ObservationVoxel(out, tup.obs.bounds), action=action)


# -- dataset loading -------------------------------------------------------------------

@dataclass
class SceneData:
    scene_id: int
    views: list[dict]
    demos: list[SyntheticDemo] = field(default_factory=list)
    spec: SceneSpec | None = None
    path: Path | None = None

    @property
    def bounds(self):
        return self.spec.bounds if self.spec is not None else None


def _numbered(paths, pattern):
    found = []
    for p in paths:
        m = re.fullmatch(pattern, p.name)
        if m:
            found.append((int(m.group(1)), p))
    return sorted(found)


def load_demo(ddir: Path) -> SyntheticDemo:
    frames = []
    path = ddir / "frames.jsonl"
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if line.strip():
                try:
                    frames.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{line_no}: {exc.msg}") from exc
    task = (ddir / "lang.txt").read_text()
    return SyntheticDemo(
        poses=np.array([f["pose"] for f in frames], dtype=np.float64),
        eulers=np.array([f["euler"] for f in frames], dtype=np.float64),
        open=np.array([f["open"] for f in frames]),
        timesteps=np.array([f["timestep"] for f in frames], dtype=np.float64),
        joint_vel=np.array([f["joint_vel"] for f in frames], dtype=np.float64),
        task=task,
        collide=np.array([f.get("collide", 0) for f in frames]),
    )


def load_views(vdir: Path) -> list[dict]:
    ids = sorted({int(m.group(1)) for m in (re.fullmatch(r"(\d+)\..*", p.name) for p in vdir.iterdir()) if m})
    views = []
    for k in ids:
        cam_path = vdir / f"{k}.cam.json"
        if not cam_path.exists():
            raise FileNotFoundError(f"view {k}: missing camera file {cam_path}")
        cam = CameraModel.from_json(json.loads(cam_path.read_text()))
        view = {"cam": cam, "id": k}
        for kind in ("rgb", "depth", "feat"):
            p = vdir / f"{k}.{kind}.gnft"
            if not p.exists():
                raise FileNotFoundError(f"view {k}: missing {kind} file {p}")
            view[kind] = gnft.load(p)
        views.append(view)
    return views


def load_dataset(root) -> list[SceneData]:
    """Read every ``scene_<id>`` directory under ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    scenes = []
    for sid, sdir in _numbered(root.iterdir(), r"scene_(\d+)"):
        spec = None
        if (sdir / "scene.json").exists():
            spec = SceneSpec.from_json(json.loads((sdir / "scene.json").read_text()))
        views = load_views(sdir / "views")
        demos = [load_demo(d) for _, d in _numbered(sdir.iterdir(), r"demo_(\d+)")]
        scenes.append(SceneData(sid, views, demos, spec, sdir))
    if not scenes:
        raise FileNotFoundError(f"no scene_<id> directories under {root}")
    return scenes
