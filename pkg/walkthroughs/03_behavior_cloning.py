"""Joint behaviour cloning on the scripted reach task, scored on unseen primitive placements.

Run: python walkthroughs/03_behavior_cloning.py [iterations] [--no-gnf]
"""
import sys
import time

from fieldpolicy.demos import SceneData
from fieldpolicy.scene import default_cameras, generate_scene, render_views, replace_scene, script_demo
from fieldpolicy.trainer import TrainConfig, Trainer, build_tuples, evaluate_policy


def make_scenes(seeds, cams, placement_seed=None):
    # with a placement seed each primitive is kept but put somewhere new on the floor
    out = []
    for i, seed in enumerate(seeds):
        spec = generate_scene(seed)
        if placement_seed is not None:
            seed = placement_seed + i
            spec = replace_scene(spec, seed)
        out.append(SceneData(i, render_views(spec, cams), [script_demo(spec, "reach-primitive", seed)], spec))
    return out


def main(iterations=1200, no_gnf=False):
    cams = default_cameras(5, 32)
    train = make_scenes(range(10), cams)
    held_out = make_scenes(list(range(10)) * 2, cams, placement_seed=1000)
    # whole-cell xy shifts, clipped gradients and a cosine decay keep the small dataset from overfitting or diverging
    cfg = TrainConfig(iterations=iterations, no_gnf=no_gnf, aug_shift=3, lr=2e-4, grad_clip=50.0, lr_schedule="cosine")
    trainer = Trainer(cfg, train)
    test = build_tuples(held_out, cfg)
    print(f"{len(trainer.tuples)} training keyframes, {len(test)} held-out")
    t0 = time.perf_counter()

    def progress(tr, rec):
        if tr.iteration % 100 == 0:
            print(f"iter {tr.iteration}: action loss {rec['l_action']:.3f} ({time.perf_counter() - t0:.0f}s)")

    trainer.train(callback=progress)
    for name, tuples in (("train", trainer.tuples), ("held-out", test)):
        r = evaluate_policy(trainer.agent, cfg, tuples)
        print(f"{name}: translation exact {r['translation_exact']:.2f} within-one {r['translation_within_one']:.2f} "
              f"rotation {r['rotation_exact']:.2f} open {r['open']:.2f} collide {r['collide']:.2f}")


if __name__ == "__main__":
    args = [a for a in sys.argv[1:] if not a.startswith("--")]
    main(int(args[0]) if args else 1200, "--no-gnf" in sys.argv)
