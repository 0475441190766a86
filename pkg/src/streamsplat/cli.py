"""Command-line entry point: generate, run, eval, bench, render."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, synthgen
from .config import Config, dump_toml, load_config
from .evaluation import load_lpips, run_protocol
from .pipeline import Pipeline, bench, run_sequence
from .rasterizer import render
from .types import CameraPose, filter_renderable, normalize_pose_sequence

log = logging.getLogger("streamsplat")


def _scene(cfg: Config, frames=None, size=None):
    traj_params = cfg.trajectory
    if frames is not None:
        traj_params = dataclasses.replace(traj_params, frames=frames)
    if size is not None:
        traj_params = dataclasses.replace(traj_params, image_size=(size, size))
    traj = synthgen.sample_trajectory(traj_params)
    obj = synthgen.make_object(cfg.scene.kind, cfg.scene.seed, cfg.scene.count, cfg.scene.radius,
                               cfg.scene.opacity_range)
    frames_ = synthgen.render_sequence(obj, traj, cfg.pipeline.render, cfg.scene.mask_threshold)
    return frames_, [p for p, _ in traj], traj[0][1]


def cmd_generate(args, cfg):
    frames, poses, intr = _scene(cfg, args.frames, args.size)
    io.save_sequence(args.out, frames, poses, intr, extra={"config": cfg.to_dict()})
    print(f"wrote {len(frames)} frames to {args.out}")


def cmd_run(args, cfg):
    frames, poses, intr, _ = io.load_sequence(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipe = Pipeline(intr, cfg.pipeline)
    canon = normalize_pose_sequence(poses)
    with open(out / "canonical_poses.json", "w") as fh:
        json.dump({"intrinsics": intr.to_dict(), "poses": [p.matrix().tolist() for p in canon]}, fh)
    with open(out / "diagnostics.jsonl", "w") as fh:
        for t, fld, diag in run_sequence(pipe, frames, poses):
            io.export_field(fld, out / f"field_{t:05d}.ply")
            fh.write(json.dumps(diag.to_dict()) + "\n")
    print(f"ran {len(frames) - 1} steps; outputs in {out}")


def cmd_eval(args, cfg):
    frames, poses, intr, _ = io.load_sequence(args.data)
    pipe = Pipeline(intr, cfg.pipeline)
    lp = load_lpips(args.lpips) if args.lpips else None
    seed = cfg.eval.split_seed if args.seed is None else args.seed
    report = run_protocol(pipe, frames, poses, seed=seed, lpips=lp, settings=cfg.eval)
    if args.json:
        report.to_json(args.json)
    if args.csv:
        report.to_csv(args.csv)
    print(report.format_table())
    return 1 if report.error else 0


def cmd_bench(args, cfg):
    frames, poses, intr = _scene(cfg, args.frames, args.size)
    res = bench(lambda: Pipeline(intr, cfg.pipeline), frames, poses, repetitions=args.repetitions)
    text = json.dumps(res, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(f"early median {res['early_median_s'] * 1e3:.2f} ms, late median {res['late_median_s'] * 1e3:.2f} ms, "
          f"ratio {res['late_over_early']:.2f}, max bank {res['max_bank_size']} / {res['capacity_tokens']}")


def cmd_render(args, cfg):
    field = io.import_field(args.ply)
    with open(args.poses) as fh:
        meta = json.load(fh)
    from .types import CameraIntrinsics

    intr = CameraIntrinsics(**meta["intrinsics"])
    pose = CameraPose.from_matrix(np.array(meta["poses"][args.frame]))
    field = filter_renderable(field, cfg.pipeline.render.bg_color, cfg.pipeline.opacity_eps, cfg.pipeline.bg_tol)
    out = render(field, pose, intr, cfg.pipeline.render)
    io.write_png(args.out, out.color)
    print(f"wrote {args.out}")


def cmd_config(args, cfg):
    print(dump_toml(cfg))


def build_parser():
    ap = argparse.ArgumentParser(prog="streamsplat", description=__doc__)
    ap.add_argument("--config", help="TOML or JSON config file")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic object sequence to a folder")
    g.add_argument("out")
    g.add_argument("--frames", type=int)
    g.add_argument("--size", type=int, help="square image size in pixels")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="stream a dataset through the pipeline; writes PLY fields and diagnostics")
    r.add_argument("data")
    r.add_argument("out")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="stage-wise novel-view evaluation")
    e.add_argument("data")
    e.add_argument("--seed", type=int)
    e.add_argument("--lpips", help="JSON list of precomputed {t, view, lpips}")
    e.add_argument("--json")
    e.add_argument("--csv")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="per-frame step time and bank size on a long synthetic stream")
    b.add_argument("--frames", type=int, default=200)
    b.add_argument("--size", type=int, default=64)
    b.add_argument("--repetitions", type=int, default=1)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    p = sub.add_parser("render", help="render a PLY field at one pose to PNG")
    p.add_argument("ply")
    p.add_argument("poses", help="poses.json with intrinsics and 4x4 world-to-camera matrices")
    p.add_argument("out")
    p.add_argument("--frame", type=int, default=0)
    p.set_defaults(func=cmd_render)

    c = sub.add_parser("config", help="print the effective config as TOML")
    c.set_defaults(func=cmd_config)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    cfg = load_config(args.config)
    return args.func(args, cfg) or 0


if __name__ == "__main__":
    sys.exit(main())
