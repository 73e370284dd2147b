"""Synthetic scenes, analytic ground-truth rendering and scripted demonstrations.

Scenes are piecewise-constant emission-absorption media made of axis-aligned
boxes and spheres.  Along any ray the medium is constant between consecutive
primitive boundary crossings, so the volume-rendering integral has a closed
form and serves as an exact oracle for the numerical renderer.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gnft

DEFAULT_BOUNDS = ((-0.5, -0.5, 0.0), (0.5, 0.5, 1.0))
TASKS = ("reach-primitive", "push-primitive-to-target")
TASK_STRINGS = {
    "reach-primitive": "reach the primitive",
    "push-primitive-to-target": "push the primitive to the target",
}


@dataclass
class Primitive:
    kind: str  # "box" or "sphere"
    center: np.ndarray
    size: np.ndarray  # half-extents (box) or (radius,) (sphere)
    density: float
    color: np.ndarray
    feature: np.ndarray

    def __post_init__(self):
        if self.kind not in ("box", "sphere"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        self.color = np.asarray(self.color, dtype=np.float64)
        self.feature = np.asarray(self.feature, dtype=np.float64)
        if self.density < 0:
            raise ValueError("primitive density must be nonnegative")

    @property
    def half_extent(self) -> np.ndarray:
        return self.size if self.kind == "box" else np.repeat(self.size[0], 3)

    def contains(self, points: np.ndarray) -> np.ndarray:
        d = points - self.center
        if self.kind == "box":
            return np.all(np.abs(d) <= self.size, axis=-1)
        return np.einsum("...i,...i->...", d, d) <= self.size[0] ** 2

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Entry/exit ray parameters; rays that miss get t_in > t_out."""
        if self.kind == "box":
            return ray_box(origins, dirs, self.center - self.size, self.center + self.size)
        oc = origins - self.center
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - self.size[0] ** 2
        disc = b * b - c
        hit = disc >= 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        t_in = np.where(hit, -b - root, np.inf)
        t_out = np.where(hit, -b + root, -np.inf)
        return t_in, t_out

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "center": self.center.tolist(),
            "size": self.size.tolist(),
            "density": float(self.density),
            "color": self.color.tolist(),
            "feature": self.feature.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Primitive":
        return cls(d["kind"], d["center"], d["size"], d["density"], d["color"], d["feature"])


def ray_box(origins, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (np.asarray(lo) - origins) * inv
        t1 = (np.asarray(hi) - origins) * inv
    # zero direction components: inside the slab -> unbounded, outside -> miss
    zero = dirs == 0
    inside = (origins >= lo) & (origins <= hi)
    near = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
    far = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
    return near.max(axis=-1), far.min(axis=-1)


@dataclass
class SceneSpec:
    primitives: list[Primitive]
    bounds: tuple = DEFAULT_BOUNDS
    background: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 1.0]))
    feat_dim: int = 64

    def __post_init__(self):
        self.bounds = (tuple(map(float, self.bounds[0])), tuple(map(float, self.bounds[1])))
        self.background = np.asarray(self.background, dtype=np.float64)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.bounds[0])

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.bounds[1])

    def query(self, points: np.ndarray):
        """Density, colour and feature of the medium at (M, 3) points.

        Overlaps sum densities and density-weight colour and feature.
        """
        points = np.asarray(points, dtype=np.float64)
        sigma = np.zeros(len(points))
        csum = np.zeros((len(points), 3))
        fsum = np.zeros((len(points), self.feat_dim))
        for p in self.primitives:
            m = p.contains(points) * p.density
            sigma += m
            csum += m[:, None] * p.color
            fsum += m[:, None] * p.feature
        safe = np.where(sigma > 0, sigma, 1.0)[:, None]
        return sigma, csum / safe, fsum / safe

    def to_json(self) -> dict:
        return {
            "bounds": [list(self.bounds[0]), list(self.bounds[1])],
            "background": self.background.tolist(),
            "feat_dim": self.feat_dim,
            "primitives": [p.to_json() for p in self.primitives],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        return cls([Primitive.from_json(p) for p in d["primitives"]], tuple(map(tuple, d["bounds"])),
                   d["background"], d["feat_dim"])


@dataclass
class SceneConfig:
    min_primitives: int = 1
    max_primitives: int = 1
    feat_dim: int = 64
    density_range: tuple = (30.0, 60.0)
    size_range: tuple = (0.08, 0.14)
    bounds: tuple = DEFAULT_BOUNDS
    background: tuple = (1.0, 1.0, 1.0)
    palette: tuple = ((0.85, 0.15, 0.1), (0.1, 0.6, 0.2), (0.15, 0.3, 0.85), (0.9, 0.75, 0.1))


def generate_scene(seed: int, config: SceneConfig | None = None) -> SceneSpec:
    config = config or SceneConfig()
    if config.feat_dim < 1:
        raise ValueError(f"feat_dim must be >= 1, got {config.feat_dim}")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(config.min_primitives, config.max_primitives + 1))
    lo, hi = np.asarray(config.bounds[0]), np.asarray(config.bounds[1])
    prims = []
    for _ in range(n):
        kind = "box" if rng.random() < 0.5 else "sphere"
        half = rng.uniform(*config.size_range, size=3 if kind == "box" else 1)
        ext = half if kind == "box" else np.repeat(half, 3)
        center = _place(rng, ext, lo, hi)
        color = np.asarray(config.palette[int(rng.integers(len(config.palette)))], dtype=np.float64)
        feat = rng.standard_normal(config.feat_dim)
        feat /= np.linalg.norm(feat)
        prims.append(Primitive(kind, center, half, float(rng.uniform(*config.density_range)), color, feat))
    return SceneSpec(prims, config.bounds, config.background, config.feat_dim)


def _place(rng, ext, lo, hi) -> np.ndarray:
    # resting on the floor of the workspace, inside the inner region
    margin = 0.1 * (hi - lo)
    cx = rng.uniform(lo[0] + margin[0] + ext[0], hi[0] - margin[0] - ext[0])
    cy = rng.uniform(lo[1] + margin[1] + ext[1], hi[1] - margin[1] - ext[1])
    return np.array([cx, cy, lo[2] + ext[2]])


def replace_scene(spec: SceneSpec, seed: int) -> SceneSpec:
    """The same primitives (kind, size, colour, feature) at new floor placements drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    lo, hi = spec.lo, np.asarray(spec.bounds[1])
    prims = [replace(p, center=_place(rng, p.half_extent, lo, hi)) for p in spec.primitives]
    return SceneSpec(prims, spec.bounds, spec.background, spec.feat_dim)


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    H: int
    W: int
    c2w: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        rot = self.c2w[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation block is not orthonormal")
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "H": self.H, "W": self.W,
                "near": self.near, "far": self.far, "c2w": self.c2w.reshape(-1).tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["H"]), int(d["W"]), d["c2w"], d["near"], d["far"])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world transform; camera x right, y down, z forward."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-8:
        x = np.cross(z, [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = x, y, z, eye
    return c2w


def make_camera(eye, target, size: int, bounds=DEFAULT_BOUNDS, fov_deg: float = 50.0) -> CameraModel:
    lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
    centre = 0.5 * (lo + hi)
    radius = 0.5 * np.linalg.norm(hi - lo)
    dist = np.linalg.norm(np.asarray(eye) - centre)
    f = 0.5 * size / np.tan(np.deg2rad(fov_deg) / 2)
    near = max(0.05, dist - radius)
    return CameraModel(f, f, size / 2, size / 2, size, size, look_at(eye, target), near, dist + radius)


def default_cameras(n_views: int, size: int, bounds=DEFAULT_BOUNDS) -> list[CameraModel]:
    """View 0 is the front camera; the rest ring the workspace at alternating elevations."""
    lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
    centre = 0.5 * (lo + hi)
    target = np.array([centre[0], centre[1], lo[2] + 0.25 * (hi[2] - lo[2])])
    # the front camera looks down at the floor and is framed so every placement stays in view
    front_target = np.array([centre[0], centre[1], lo[2] + 0.1 * (hi[2] - lo[2])])
    cams = [make_camera(centre + np.array([0.0, -1.2, 0.9]), front_target, size, bounds, fov_deg=34.0)]
    for k in range(1, n_views):
        az = 2 * np.pi * (k - 1) / max(n_views - 1, 1) + np.pi / 4
        elev = 0.9 if k % 2 else 0.5
        eye = centre + np.array([1.5 * np.cos(az), 1.5 * np.sin(az), elev])
        cams.append(make_camera(eye, target, size, bounds))
    return cams


def camera_rays(cam: CameraModel, pixels: np.ndarray | None = None):
    """Origins and unit directions through pixel centres; pixels are (row, col) pairs."""
    if pixels is None:
        rows, cols = np.meshgrid(np.arange(cam.H), np.arange(cam.W), indexing="ij")
        pixels = np.stack([rows.ravel(), cols.ravel()], axis=-1)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    u = pixels[:, 1] + 0.5
    v = pixels[:, 0] + 0.5
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    d = d_cam @ cam.c2w[:3, :3].T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(cam.c2w[:3, 3], d.shape).copy()
    return o, d


def render_rays_analytic(scene: SceneSpec, origins, dirs, t_near, t_far):
    """Closed-form colour, depth, feature and accumulated weight for a batch of rays.

    Colour excludes the background: returns the emitted part and the residual
    transmittance separately so callers can composite.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    R = len(origins)
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (R,))
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (R,))
    bps = [t_near, t_far]
    spans = []
    for p in scene.primitives:
        t_in, t_out = p.intersect(origins, dirs)
        spans.append((t_in, t_out))
        bps += [np.clip(t_in, t_near, t_far), np.clip(t_out, t_near, t_far)]
    t = np.sort(np.stack(bps, axis=-1), axis=-1)
    seg_len = np.diff(t, axis=-1)
    mid = 0.5 * (t[:, 1:] + t[:, :-1])
    K = seg_len.shape[1]
    sigma = np.zeros((R, K))
    csum = np.zeros((R, K, 3))
    fsum = np.zeros((R, K, scene.feat_dim))
    for p, (t_in, t_out) in zip(scene.primitives, spans):
        inside = (mid >= t_in[:, None]) & (mid <= t_out[:, None]) & (seg_len > 0)
        m = inside * p.density
        sigma += m
        csum += m[..., None] * p.color
        fsum += m[..., None] * p.feature
    safe = np.where(sigma > 0, sigma, 1.0)[..., None]
    color, feat = csum / safe, fsum / safe
    tau = sigma * seg_len
    trans = np.exp(-(np.cumsum(tau, axis=-1) - tau))
    w = trans * (1.0 - np.exp(-tau))
    acc = w.sum(axis=-1)
    rgb = np.einsum("rk,rkc->rc", w, color)
    f = np.einsum("rk,rkc->rc", w, feat)
    depth = (w * mid).sum(axis=-1) + (1.0 - acc) * t_far
    return rgb, depth, f, acc


def render_analytic(scene: SceneSpec, cam: CameraModel):
    """Ground-truth RGB (H, W, 3), depth (H, W) and feature (H, W, D_f) images."""
    o, d = camera_rays(cam)
    rgb, depth, feat, acc = render_rays_analytic(scene, o, d, cam.near, cam.far)
    rgb = rgb + (1.0 - acc)[:, None] * scene.background
    return (rgb.reshape(cam.H, cam.W, 3), depth.reshape(cam.H, cam.W),
            feat.reshape(cam.H, cam.W, scene.feat_dim))


# -- scripted demonstrations -------------------------------------------------

@dataclass
class SyntheticDemo:
    poses: np.ndarray  # (F, 3)
    eulers: np.ndarray  # (F, 3) degrees in [0, 360)
    open: np.ndarray  # (F,) 0/1
    timesteps: np.ndarray  # (F,)
    joint_vel: np.ndarray  # (F,)
    task: str
    collide: np.ndarray | None = None  # (F,) 0/1
    keyframes: list[int] = field(default_factory=list)
    actions: list = field(default_factory=list)  # DiscretizedAction per keyframe

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 3)
        self.eulers = np.asarray(self.eulers, dtype=np.float64).reshape(-1, 3)
        self.open = np.asarray(self.open, dtype=np.int64)
        self.timesteps = np.asarray(self.timesteps, dtype=np.float64)
        self.joint_vel = np.asarray(self.joint_vel, dtype=np.float64)
        if self.collide is None:
            self.collide = np.zeros(len(self.poses), dtype=np.int64)
        self.collide = np.asarray(self.collide, dtype=np.int64)
        if np.any(np.diff(self.timesteps) <= 0):
            raise ValueError("demo timesteps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)


def _ease(n: int) -> np.ndarray:
    s = np.linspace(0.0, 1.0, n + 1)[1:]
    return s * s * (3.0 - 2.0 * s)


def _segment(start, end, n):
    s = _ease(n)[:, None]
    return start + s * (np.asarray(end) - start)


def script_demo(scene: SceneSpec, task: str, seed: int, n_voxels: int = 32, dt: float = 0.05) -> SyntheticDemo:
    """Scripted expert trajectory with zero-velocity dwells at waypoints.

    reach-primitive: move to a hover pose above primitive 0, dwell, descend
    to its centre, dwell, close the gripper, hold.
    push-primitive-to-target: with the gripper closed, move behind primitive 0,
    dwell, push it towards a random target, dwell, retreat upward.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if not scene.primitives:
        raise ValueError("scripted demos need at least one primitive")
    rng = np.random.default_rng(seed)
    lo, hi = scene.lo, scene.hi
    target = scene.primitives[0]
    top = target.center + np.array([0.0, 0.0, target.half_extent[2]])
    start = np.array([0.0, lo[1] + 0.2 * (hi[1] - lo[1]), lo[2] + 0.7 * (hi[2] - lo[2])])
    euler = np.array([0.0, 180.0, 0.0])

    waypoints: list[tuple[np.ndarray, int, int, int]] = []  # (pose, open, collide, frames to reach)
    if task == "reach-primitive":
        hover = top + np.array([0.0, 0.0, 0.12])
        plan = [(hover, 1, 1, 10), (hover, 1, 1, 0), (target.center, 1, 0, 6), (target.center, 1, 0, 0),
                (target.center, 0, 0, 0), (target.center, 0, 0, 0)]
        open0 = 1
    else:
        goal = np.array([rng.uniform(lo[0] + 0.2, hi[0] - 0.2), rng.uniform(lo[1] + 0.2, hi[1] - 0.2),
                         target.center[2]])
        push_dir = goal - target.center
        push_dir /= max(np.linalg.norm(push_dir), 1e-9)
        behind = target.center - push_dir * (target.half_extent.max() + 0.05)
        end = goal - push_dir * (target.half_extent.max() + 0.05)
        retreat = end + np.array([0.0, 0.0, 0.2])
        plan = [(behind, 0, 1, 10), (behind, 0, 1, 0), (end, 0, 0, 8), (end, 0, 0, 0),
                (retreat, 0, 1, 5), (retreat, 0, 1, 0)]
        open0 = 0
    for pose, op, col, n in plan:
        waypoints.append((np.asarray(pose, dtype=np.float64), op, col, n))

    poses = [start]
    opens = [open0]
    colls = [1]
    for pose, op, col, n in waypoints:
        if n == 0:
            poses.append(pose.copy())
            opens.append(op)
            colls.append(col)
        else:
            for p in _segment(poses[-1], pose, n):
                poses.append(p)
                opens.append(opens[-1])
                colls.append(col)
    poses = np.array(poses)
    F = len(poses)
    vel = np.zeros(F)
    vel[1:] = np.linalg.norm(np.diff(poses, axis=0), axis=1) / dt
    eulers = np.repeat(euler[None], F, axis=0)
    demo = SyntheticDemo(poses, eulers, np.array(opens), np.arange(F) / (F - 1), vel, TASK_STRINGS[task],
                         np.array(colls))
    from .demos import extract_keyframes
    from .policy import discretize_action

    demo.keyframes = extract_keyframes(demo)
    demo.actions = [discretize_action(demo.poses[k], demo.eulers[k], demo.open[k], demo.collide[k],
                                      scene.bounds, n_voxels) for k in demo.keyframes]
    return demo


# -- dataset export ------------------------------------------------------------

def frame_records(demo: SyntheticDemo) -> list[dict]:
    return [{"pose": demo.poses[i].tolist(), "euler": demo.eulers[i].tolist(), "open": int(demo.open[i]),
             "timestep": float(demo.timesteps[i]), "joint_vel": float(demo.joint_vel[i]),
             "collide": int(demo.collide[i])} for i in range(len(demo))]


def write_scene(root: str | os.PathLike, scene_id: int, scene: SceneSpec | None, views: list[dict],
                demos: list[SyntheticDemo]) -> Path:
    """Write one scene directory from already-rendered views.

    Each view dict holds ``rgb``, ``depth``, ``feat`` arrays and a ``cam``.
    """
    sdir = Path(root) / f"scene_{scene_id}"
    vdir = sdir / "views"
    try:
        vdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {vdir}: {exc.strerror}") from exc
    if scene is not None:
        (sdir / "scene.json").write_text(json.dumps(scene.to_json()))
    for k, view in enumerate(views):
        gnft.save(vdir / f"{k}.rgb.gnft", np.asarray(view["rgb"], dtype=np.float32))
        gnft.save(vdir / f"{k}.depth.gnft", np.asarray(view["depth"], dtype=np.float32))
        gnft.save(vdir / f"{k}.feat.gnft", np.asarray(view["feat"], dtype=np.float32))
        (vdir / f"{k}.cam.json").write_text(json.dumps(view["cam"].to_json()))
    for j, demo in enumerate(demos):
        ddir = sdir / f"demo_{j}"
        ddir.mkdir(exist_ok=True)
        with open(ddir / "frames.jsonl", "w") as fh:
            for rec in frame_records(demo):
                fh.write(json.dumps(rec) + "\n")
        (ddir / "lang.txt").write_text(demo.task)
    return sdir


def render_views(scene: SceneSpec, cams: list[CameraModel]) -> list[dict]:
    views = []
    for cam in cams:
        rgb, depth, feat = render_analytic(scene, cam)
        views.append({"rgb": rgb, "depth": depth, "feat": feat, "cam": cam})
    return views


def export_dataset(scenes: list[SceneSpec], demos: list[list[SyntheticDemo]], cams, out_dir) -> Path:
    """Render every view of every scene and write the on-disk dataset.

    ``cams`` is either one camera list shared by all scenes or one list per scene.
    """
    out = Path(out_dir)
    shared = cams and isinstance(cams[0], CameraModel)
    for i, scene in enumerate(scenes):
        scene_cams = cams if shared else cams[i]
        write_scene(out, i, scene, render_views(scene, scene_cams), demos[i] if demos else [])
    return out
