"""Command-line entry point: ``python -m fieldpolicy <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np


def _cmd_gen_scenes(args) -> int:
    from .scene import SceneConfig, default_cameras, export_dataset, generate_scene, script_demo

    cfg = SceneConfig(feat_dim=args.feat_dim)
    scenes = [generate_scene(args.seed + i, cfg) for i in range(args.scenes)]
    demos = [[script_demo(s, args.task, args.seed * 1000 + i * 31 + j, n_voxels=args.grid)
              for j in range(args.demos)] if s.primitives else [] for i, s in enumerate(scenes)]
    cams = default_cameras(args.views, args.size)
    out = export_dataset(scenes, demos, cams, args.out)
    print(json.dumps({"out": str(out), "scenes": len(scenes), "views": args.views, "demos_per_scene": args.demos}))
    return 0


def _cmd_extract_keyframes(args) -> int:
    from .demos import extract_keyframes, load_dataset

    report = {}
    for scene in load_dataset(args.data):
        for j, demo in enumerate(scene.demos):
            report[f"scene_{scene.scene_id}/demo_{j}"] = extract_keyframes(demo, args.eps_v)
    print(json.dumps(report))
    return 0


def _load_config(args):
    from .trainer import TrainConfig

    overrides = {}
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
    if getattr(args, "iterations", None) is not None:
        overrides["iterations"] = args.iterations
    return TrainConfig.preset(args.preset, **overrides)


def _cmd_train(args) -> int:
    from .demos import load_dataset
    from .trainer import Trainer

    config = _load_config(args)
    if args.preset == "paper-shapes":
        print("the paper-shapes preset is for shape dry runs; use `shapecheck --preset paper-shapes`", file=sys.stderr)
        return 2
    scenes = load_dataset(args.data)
    trainer = Trainer(config, scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_json(), indent=1))
    history = trainer.train(out_dir=out)
    print(json.dumps({"iterations": trainer.iteration, "final": history[-1] if history else None,
                      "checkpoint": str(out / "ckpt_final")}))
    return 0


def _cmd_render(args) -> int:
    from PIL import Image

    from . import gnft
    from .demos import SceneData, load_views
    from .gnf import psnr
    from .scene import SceneSpec
    from .trainer import load_agent, render_view

    agent, config, _ = load_agent(args.ckpt)
    sdir = Path(args.scene)
    spec = SceneSpec.from_json(json.loads((sdir / "scene.json").read_text())) if (sdir / "scene.json").exists() else None
    scene = SceneData(0, load_views(sdir / "views"), [], spec, sdir)
    if scene.bounds is None:
        from .scene import DEFAULT_BOUNDS
        scene.spec = SceneSpec([], bounds=DEFAULT_BOUNDS)
    rgb, feat = render_view(agent, config, scene, args.view)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gnft.save(out / f"{args.view}.rgb.gnft", rgb.astype(np.float32))
    gnft.save(out / f"{args.view}.feat.gnft", feat.astype(np.float32))
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(out / f"{args.view}.png")
    print(json.dumps({"view": args.view, "psnr": psnr(rgb, scene.views[args.view]["rgb"]), "out": str(out)}))
    return 0


def _cmd_eval(args) -> int:
    from .demos import load_dataset
    from .trainer import build_tuples, evaluate_policy, load_agent

    agent, config, _ = load_agent(args.ckpt)
    tuples = build_tuples(load_dataset(args.data), config)
    print(json.dumps(evaluate_policy(agent, config, tuples)))
    return 0


def _cmd_gradcheck(args) -> int:
    from .checks import SUITES, TOLERANCE

    results = SUITES[args.suite]()
    worst = max(results.values())
    for name, err in results.items():
        print(f"{'PASS' if err <= TOLERANCE else 'FAIL'} {name}: {err:.3e}")
    print(json.dumps({"suite": args.suite, "max_rel_error": worst, "ok": worst <= TOLERANCE}))
    return 0 if worst <= TOLERANCE else 1


def _cmd_shapecheck(args) -> int:
    from .checks import shapecheck_full_scale

    rows = shapecheck_full_scale()
    ok = all(r[3] for r in rows)
    print(json.dumps({"preset": args.preset, "checks": len(rows), "ok": ok}))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fieldpolicy", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", help="generate synthetic scenes, views and scripted demos")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=1)
    g.add_argument("--views", type=int, default=5, help="view 0 is the front camera")
    g.add_argument("--size", type=int, default=32, help="image height and width in pixels")
    g.add_argument("--feat-dim", type=int, default=64)
    g.add_argument("--demos", type=int, default=1, help="scripted demos per scene")
    g.add_argument("--task", default="reach-primitive", choices=["reach-primitive", "push-primitive-to-target"])
    g.add_argument("--grid", type=int, default=32, help="voxel grid used for the stored keyframe actions")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_scenes)

    k = sub.add_parser("extract-keyframes", help="print keyframe indices of every demo as JSON")
    k.add_argument("--data", required=True)
    k.add_argument("--eps-v", type=float, default=1e-3)
    k.set_defaults(func=_cmd_extract_keyframes)

    t = sub.add_parser("train", help="joint training of encoder, field and policy")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="flat JSON file of TrainConfig keys")
    t.add_argument("--out", required=True)
    t.add_argument("--preset", default="desk", choices=["desk", "paper-shapes", "realworld"])
    t.add_argument("--iterations", type=int)
    t.set_defaults(func=_cmd_train)

    r = sub.add_parser("render", help="render RGB and feature images of one view from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--scene", required=True, help="scene_<id> directory")
    r.add_argument("--view", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=_cmd_render)

    e = sub.add_parser("eval", help="keyframe accuracy of a checkpoint on a dataset, as JSON")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=_cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--suite", required=True, choices=["ops", "render", "policy"])
    c.set_defaults(func=_cmd_gradcheck)

    s = sub.add_parser("shapecheck", help="full-scale shape dry run")
    s.add_argument("--preset", default="paper-shapes", choices=["paper-shapes"])
    s.set_defaults(func=_cmd_shapecheck)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
