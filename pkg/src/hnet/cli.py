"""Command-line surface: scene generation, training, inference, evaluation,
gradient checking, and parameter accounting.

Exit codes: 0 success, 1 validation/usage failure, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checks
from . import fileio
from . import losses as lss
from . import metrics as mt
from . import model as mdl
from . import scenes as sc
from . import training as tr
from .ot import NumericalError, SinkhornConfig


def _scene_from_args(args) -> sc.SceneConfig:
    if getattr(args, "scene_config", None):
        with open(args.scene_config) as f:
            return sc.scene_config_from_text(f.read())
    presets = sc.scene_presets()
    if args.preset not in presets:
        raise ValueError(f"unknown preset {args.preset!r}; "
                         f"choose from {sorted(presets)}")
    return presets[args.preset]


def _model_from_args(args, scene: sc.SceneConfig) -> mdl.ModelConfig:
    widths = tuple(int(w) for w in args.widths.split(","))
    return mdl.ModelConfig(
        height=scene.height, width=scene.width, widths=widths,
        scales=args.scales, attention=args.mode,
        sinkhorn=SinkhornConfig(epsilon=args.sinkhorn_epsilon,
                                max_iters=args.sinkhorn_iters,
                                tol=args.sinkhorn_tol))


def cmd_gen(args, argv) -> int:
    scene = _scene_from_args(args)
    sample = sc.generate_scene(scene, args.seed)
    out = fileio.ensure_dir(args.out)
    meta = {"command": " ".join(argv), "seed": args.seed}
    with open(os.path.join(out, "scene.cfg"), "w") as f:
        f.write(sc.scene_config_to_text(scene))
    fileio.write_ppm(os.path.join(out, "left.ppm"), sample.il)
    fileio.write_ppm(os.path.join(out, "right.ppm"), sample.ir)
    fileio.write_raw(os.path.join(out, "left.raw"), sample.il,
                     dict(meta, units="intensity"))
    fileio.write_raw(os.path.join(out, "right.raw"), sample.ir,
                     dict(meta, units="intensity"))
    fileio.write_raw(os.path.join(out, "disp.raw"), sample.gt_disparity,
                     dict(meta, units="pixels"))
    fileio.write_raw(os.path.join(out, "depth.raw"), sample.gt_depth,
                     dict(meta, units="depth"))
    occ = sample.occlusion.astype(np.uint16) * np.uint16(65535)
    fileio.write_pgm16(os.path.join(out, "occlusion.pgm"), occ)
    with open(os.path.join(out, "occlusion.pgm.txt"), "w") as f:
        f.write(fileio.dump_kv(dict(meta, mapping="0=visible,65535=occluded")))
    print(f"wrote scene to {out}")
    return 0


def load_scene_dir(path: str) -> sc.StereoSample:
    with open(os.path.join(path, "scene.cfg")) as f:
        scene = sc.scene_config_from_text(f.read())
    il, meta = fileio.read_raw(os.path.join(path, "left.raw"))
    ir, _ = fileio.read_raw(os.path.join(path, "right.raw"))
    disp, _ = fileio.read_raw(os.path.join(path, "disp.raw"))
    depth, _ = fileio.read_raw(os.path.join(path, "depth.raw"))
    occ = fileio.read_pgm16(os.path.join(path, "occlusion.pgm")) > 0
    return sc.StereoSample(il=il, ir=ir, gt_disparity=disp, gt_depth=depth,
                           occlusion=occ, camera=scene.camera, scene=scene,
                           seed=int(meta.get("seed", -1)))


def cmd_train(args, argv) -> int:
    if args.config:
        with open(args.config) as f:
            cfg = tr.train_config_from_text(f.read())
    else:
        scene = _scene_from_args(args)
        model_cfg = _model_from_args(args, scene)
        cfg = tr.TrainConfig(
            steps=args.steps, model=model_cfg, scene=scene,
            loss=lss.LossConfig(scales=args.scales),
            scene_seeds=tuple(int(s) for s in args.scene_seeds.split(",")),
            lr=args.lr, seed=args.seed)
    result = tr.train(cfg, out_dir=args.out)
    print(f"step 0 loss {result.log[0][3]:.6f} -> "
          f"step {result.log[-1][0]} loss {result.log[-1][3]:.6f}")
    print(f"wrote checkpoint and loss log to {args.out}")
    return 0


def cmd_infer(args, argv) -> int:
    params = mdl.load_checkpoint(args.checkpoint)
    sample = load_scene_dir(args.scene_dir)
    result = tr.infer(params, sample)
    out = fileio.ensure_dir(args.out)
    meta = {"command": " ".join(argv), "units": "depth"}
    for name, depth in (("depth_left", result.depth_left),
                        ("depth_right", result.depth_right)):
        fileio.write_raw(os.path.join(out, f"{name}.raw"), depth, meta)
        lo, hi = float(depth.min()), float(depth.max())
        if hi <= lo:
            hi = lo + 1e-6
        fileio.write_pgm16(os.path.join(out, f"{name}.pgm"),
                           fileio.gray16_quantize(depth[0], lo, hi))
        with open(os.path.join(out, f"{name}.pgm.txt"), "w") as f:
            f.write(fileio.dump_kv({
                "command": " ".join(argv),
                "mapping": "gray = round((depth - lo) / (hi - lo) * 65535)",
                "lo": repr(lo), "hi": repr(hi)}))
    print(f"wrote depth maps to {out}")
    return 0


def cmd_eval(args, argv) -> int:
    params = mdl.load_checkpoint(args.checkpoint)
    sample = load_scene_dir(args.scene_dir)
    report = tr.evaluate(params, sample, cap=args.cap)
    row = mt.csv_row(report)
    print(mt.CSV_HEADER)
    print(row)
    if args.out:
        fileio.ensure_dir(args.out)
        with open(os.path.join(args.out, "metrics.csv"), "w") as f:
            f.write(mt.CSV_HEADER + "\n" + row + "\n")
    return 0


def cmd_gradcheck(args, argv) -> int:
    results = checks.run_suite(quick=args.quick)
    worst = max(r.error for r in results)
    for r in results:
        print(f"{'pass' if r.passed else 'FAIL'}  {r.name:30s} {r.error:.3e}")
    print(f"worst relative error: {worst:.3e} (tolerance {checks.GRADCHECK_TOL})")
    return 0 if all(r.passed for r in results) else 2


def cmd_params(args, argv) -> int:
    height = args.height
    width = args.width
    cfg = mdl.ModelConfig(height=height, width=width,
                          widths=tuple(int(w) for w in args.widths.split(",")),
                          scales=args.scales, attention=args.mode)
    comps = mdl.expected_param_count(cfg)
    print(f"attention mode: {cfg.attention}")
    for key in ("encoder", "fusion", "decoder", "heads", "attention"):
        print(f"{key:10s} {comps[key]:10d}")
    print(f"{'total':10s} {comps['total']:10d}")
    print(f"attention increment over mode=off: {comps['attention']}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValueError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="hnet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_scene_flags(q):
        q.add_argument("--preset", default="two-plane")
        q.add_argument("--scene-config", default=None,
                       help="scene config file (overrides --preset)")

    g = sub.add_parser("gen", help="generate a synthetic stereo scene")
    add_scene_flags(g)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    tcmd = sub.add_parser("train", help="train on synthetic scenes")
    add_scene_flags(tcmd)
    tcmd.add_argument("--config", default=None, help="train config file")
    tcmd.add_argument("--out", required=True)
    tcmd.add_argument("--steps", type=int, default=500)
    tcmd.add_argument("--lr", type=float, default=1e-4)
    tcmd.add_argument("--seed", type=int, default=0)
    tcmd.add_argument("--scene-seeds", default="0")
    tcmd.add_argument("--mode", default="ot-mea", choices=mdl.ATTENTION_CHOICES)
    tcmd.add_argument("--widths", default="8,16,32")
    tcmd.add_argument("--scales", type=int, default=3)
    tcmd.add_argument("--sinkhorn-epsilon", type=float, default=0.05)
    tcmd.add_argument("--sinkhorn-iters", type=int, default=100)
    tcmd.add_argument("--sinkhorn-tol", type=float, default=1e-6)

    i = sub.add_parser("infer", help="run a checkpoint on a generated scene")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scene-dir", required=True)
    i.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="infer + depth metrics against ground truth")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scene-dir", required=True)
    e.add_argument("--out", default=None)
    e.add_argument("--cap", type=float, default=80.0)

    gc = sub.add_parser("gradcheck", help="finite-difference verification suite")
    gc.add_argument("--quick", action="store_true",
                    help="sample the end-to-end sweep instead of all entries")

    pc = sub.add_parser("params", help="parameter-count breakdown")
    pc.add_argument("--mode", default="ot-mea", choices=mdl.ATTENTION_CHOICES)
    pc.add_argument("--widths", default="8,16,32")
    pc.add_argument("--height", type=int, default=32)
    pc.add_argument("--width", type=int, default=64)
    pc.add_argument("--scales", type=int, default=3)
    return p


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args, ["hnet"] + argv)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
