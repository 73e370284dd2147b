"""Fit encoder + feature field to one scene from four auxiliary views (no policy).

Run: python walkthroughs/02_fit_feature_field.py [iterations]
"""
import sys
import time

from fieldpolicy.demos import SceneData
from fieldpolicy.scene import default_cameras, generate_scene, render_views, script_demo
from fieldpolicy.trainer import TrainConfig, Trainer, evaluate_render


def report(trainer, scene, tag):
    rows = evaluate_render(trainer.agent, trainer.config, scene)
    psnr = sum(r["psnr"] for r in rows) / len(rows)
    mse = sum(r["feature_mse"] for r in rows) / len(rows)
    print(f"{tag}: psnr {psnr:.2f} dB, feature mse {mse:.4f}")
    return mse


def main(iterations=300):
    spec = generate_scene(0)
    scene = SceneData(0, render_views(spec, default_cameras(5, 32)), [script_demo(spec, "reach-primitive", 0)], spec)
    # reconstruction only: the action term is switched off
    cfg = TrainConfig(lambda_action=0.0)
    trainer = Trainer(cfg, [scene])
    mse0 = report(trainer, scene, "init")
    t0 = time.perf_counter()
    trainer.train(iterations)
    mse = report(trainer, scene, f"after {iterations} iterations ({time.perf_counter() - t0:.0f}s)")
    print(f"feature mse reduced {mse0 / mse:.1f}x")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 300)
