"""Command-line entry point.

Exit codes: 0 success, 1 contract violation (including bad arguments and
unknown subcommands), 2 I/O or format error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from . import io
from .errors import ContractViolation, DivergenceError, FormatError
from .evaluation import compute_metrics, evaluate_depth
from .geometry import rectified_intrinsics, unproject_rectified
from .losses import Frames, total_loss
from .optimizer import DepthProblem, gradcheck, optimize, random_problem
from .oracle import default_trajectory, depth_bias_field, make_snippet, make_teacher, preset_scene, relative_pose
from .synthesis import DepthGrid, rectify_depth

FRAME_NAMES = ("frame_0.pgm", "frame_1.pgm", "frame_2.pgm")
GT_NAME = "gt_depth.pfm"
TEACHER_NAME = "teacher.pfm"
MANIFEST = "manifest.txt"


class UsageError(ContractViolation):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage().strip()}\n{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fisheye-depth", description="Fisheye depth recovery toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="key-value config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="render an oracle snippet bundle")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--teacher", action="store_true", help="also write an order-preserving corrupted teacher map")

    w = sub.add_parser("warp", parents=[common], help="synthesize the target from one source frame")
    w.add_argument("--bundle", required=True, type=Path)
    w.add_argument("--source", type=int, choices=(0, 1), default=0, help="0: previous frame, 1: next frame")
    w.add_argument("--depth", type=Path, help="target depth PFM (default: the bundle's ground truth)")
    w.add_argument("--out", required=True, type=Path, help="output PGM")

    lo = sub.add_parser("loss", parents=[common], help="evaluate the total loss for one depth map")
    lo.add_argument("--bundle", required=True, type=Path)
    lo.add_argument("--depth", type=Path, help="depth PFM used at every scale (default: ground truth)")
    lo.add_argument("--teacher", type=Path)
    lo.add_argument("--steps", type=int, default=0)

    o = sub.add_parser("optimize", parents=[common], help="recover depth for a bundle")
    o.add_argument("--bundle", required=True, type=Path)
    o.add_argument("--teacher", type=Path)
    o.add_argument("--out", required=True, type=Path)
    o.add_argument("--points", action="store_true", help="also write an ASCII X Y Z point cloud")

    e = sub.add_parser("eval", parents=[common], help="depth metrics of a prediction")
    e.add_argument("--pred", required=True, type=Path)
    e.add_argument("--gt", required=True, type=Path)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference check on a random problem")
    c.add_argument("--samples", type=int, default=200)
    c.add_argument("--width", type=int, default=16)
    c.add_argument("--height", type=int, default=12)
    return p


def _snippet(cfg: io.Config):
    sc, tr = cfg.scene, cfg.trajectory
    scene = preset_scene(sc.preset, default_trajectory(tr.baseline, tr.forward, tr.yaw), sc.contrast_scale,
                         room_depth=sc.room_depth, room_height=sc.room_height,
                         wall_frequency=sc.wall_frequency, object_frequency=sc.object_frequency)
    return make_snippet(scene, cfg.intrinsics)


def cmd_gen(args, cfg: io.Config):
    if cfg.scene.bits not in (8, 16):
        raise ContractViolation("[scene] bits must be 8 or 16")
    sn = _snippet(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    maxval = 255 if cfg.scene.bits == 8 else 65535
    for name, img in zip(FRAME_NAMES, sn.frames):
        io.write_pgm(args.out / name, img, maxval)
    io.write_pfm(args.out / GT_NAME, sn.gt_depth)
    io.write_manifest(args.out / MANIFEST, FRAME_NAMES, sn.poses)
    written = list(FRAME_NAMES) + [GT_NAME, MANIFEST]
    if args.teacher:
        tc = cfg.teacher
        bias = depth_bias_field(sn.gt_depth, tc.bias_amplitude, tc.bias_frequency, seed=args.seed)
        io.write_pfm(args.out / TEACHER_NAME, make_teacher(sn.gt_depth, tc.gamma, bias))
        written.append(TEACHER_NAME)
    print(json.dumps({"out": str(args.out), "files": written}))


def _bundle(path: Path, cfg: io.Config):
    entries = io.read_manifest(path / MANIFEST)
    if len(entries) != 3:
        raise FormatError(f"{path / MANIFEST}: expected 3 frames, found {len(entries)}")
    frames = [io.read_pgm(path / name) for name, _ in entries]
    poses = [p for _, p in entries]
    intr = cfg.intrinsics
    for (name, _), f in zip(entries, frames):
        if tuple(f.shape) != (intr.height, intr.width):
            raise ContractViolation(f"{name} is {tuple(f.shape)}, intrinsics expect {(intr.height, intr.width)}")
    rel = [relative_pose(poses[1], poses[0]), relative_pose(poses[1], poses[2])]
    return frames, rel


def _depth(path: Path | None, bundle: Path) -> DepthGrid:
    return io.read_pfm(path if path is not None else bundle / GT_NAME)


def _problem(args, cfg: io.Config, teacher_path=None) -> DepthProblem:
    frames, rel = _bundle(args.bundle, cfg)
    teacher = io.ingest_teacher(teacher_path, cfg.teacher.mode) if teacher_path is not None else None
    return DepthProblem(frames[1], [frames[0], frames[2]], rel, cfg.intrinsics, cfg.loss, cfg.schedule, teacher)


def cmd_warp(args, cfg: io.Config):
    frames, rel = _bundle(args.bundle, cfg)
    depth = _depth(args.depth, args.bundle)
    src = [frames[0], frames[2]][args.source]
    fr = Frames(frames[1], [src], [rel[args.source]], cfg.intrinsics, cfg.loss)
    img, ok = fr.synthesize(DepthGrid(depth.depth, depth.valid & fr.depth_valid), 0)
    io.write_pgm(args.out, img)
    m = ok & fr.cmp_valid
    n = int(m.sum())
    err = float((img - fr.cmp_target).abs()[m].mean()) if n else float("nan")
    print(json.dumps({"out": str(args.out), "domain": cfg.loss.domain, "valid_pixels": n, "mean_abs_error": err}))


def cmd_loss(args, cfg: io.Config):
    problem = _problem(args, cfg, args.teacher)
    depth = _depth(args.depth, args.bundle)
    d = torch.where(depth.valid, depth.depth, torch.ones_like(depth.depth))
    _, report = total_loss(problem.frames, [d] * cfg.loss.scales, problem.teacher, cfg.loss, cfg.schedule, args.steps)
    print(report.to_json())


def _point_cloud(depth: DepthGrid, cfg: io.Config) -> str:
    rect = rectified_intrinsics(cfg.intrinsics, cfg.loss.focal_scale)
    d_hat = rectify_depth(depth, cfg.intrinsics, rect)
    pts = unproject_rectified(d_hat.depth, rect)[d_hat.valid]
    return "".join(f"{x:.6f} {y:.6f} {z:.6f}\n" for x, y, z in pts.tolist())


def cmd_optimize(args, cfg: io.Config):
    problem = _problem(args, cfg, args.teacher)
    trace = optimize(problem, dataclasses.replace(cfg.optimizer, seed=args.seed))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "trace.jsonl").write_text(trace.to_jsonl())
    io.write_pfm(args.out / "depth.pfm", trace.depth)
    if args.points:
        (args.out / "points.xyz").write_text(_point_cloud(trace.depth, cfg))
    print(trace.reports[-1].to_json())


def cmd_eval(args, cfg: io.Config):
    pred, gt = io.read_pfm(args.pred), io.read_pfm(args.gt)
    if cfg.eval.median_scaling:
        report = evaluate_depth(pred, gt, cfg.eval.cap)
    else:
        report = compute_metrics(pred, gt, cfg.eval.cap)
    print(report.to_json())


def cmd_gradcheck(args, cfg: io.Config):
    problem, logits = random_problem(args.width, args.height, seed=args.seed, cfg=cfg.loss, sched=cfg.schedule)
    print(gradcheck(problem, logits, samples=args.samples, seed=args.seed).to_json())


COMMANDS = {
    "gen": cmd_gen,
    "warp": cmd_warp,
    "loss": cmd_loss,
    "optimize": cmd_optimize,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = io.load_config(args.config)
        COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except (ContractViolation, DivergenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
