"""Command-line entry points: data generation, training, evaluation, checks.

Every command is deterministic given ``--seed``; result tables are
tab-separated with one header line.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from .evaluation import (
    EvalConfig,
    MMA_THRESHOLDS,
    evaluate_pose,
    mean_matching_accuracy,
    network_extractor,
    oracle_extractor,
    summary_lines,
    write_pose_results,
    write_stats,
    write_table,
)
from .gradcheck import smooth_seed, surrogate_gradcheck
from .model import init_params, load_checkpoint, save_checkpoint
from .robust import RansacConfig
from .synthdata import SceneConfig, generate_dataset, read_dataset, write_dataset
from .trainer import PretrainConfig, TrainConfig, load_config, pretrain, train, write_curve


def _ransac_args(p, threshold, iters):
    p.add_argument("--inlier-threshold", type=float, default=threshold, help="epipolar distance in calibrated units")
    p.add_argument("--ransac-iters", type=int, default=iters)
    p.add_argument("--confidence", type=float, default=0.999)


def _common(p, checkpoint=True, dataset=True):
    p.add_argument("--seed", type=int, default=0)
    if checkpoint:
        p.add_argument("--checkpoint", help="parameter file (omit for a freshly initialised network)")
    if dataset:
        p.add_argument("--dataset", required=True, help="dataset directory written by 'generate'")


def _eval_args(p):
    p.add_argument("--max-keypoints", type=int, default=256)
    p.add_argument("--nms-radius", type=int, default=2)
    p.add_argument("--min-value", type=float, default=3e-4)


def _params(args):
    return load_checkpoint(args.checkpoint) if args.checkpoint else init_params(args.seed)


def _eval_config(args):
    ransac = RansacConfig(args.inlier_threshold, args.ransac_iters, args.confidence, args.seed)
    return EvalConfig(args.max_keypoints, args.nms_radius, args.min_value, ransac, seed=args.seed)


def _extractor(args, cfg):
    return oracle_extractor if args.oracle else network_extractor(_params(args), cfg)


def cmd_generate(args):
    cfg = SceneConfig(
        rotation_max_deg=args.rotation,
        baseline=(args.baseline_min, args.baseline_max),
        planar=args.planar,
    )
    write_dataset(args.out, generate_dataset(args.n, args.seed, cfg))
    print(f"wrote {args.n} pairs to {args.out}")


def cmd_pretrain(args):
    ds = read_dataset(args.dataset)
    cfg = PretrainConfig(iterations=args.iterations, learning_rate=args.lr, seed=args.seed)
    params, losses = pretrain(ds, _params(args), cfg)
    save_checkpoint(args.out, params)
    if args.curve:
        write_table(args.curve, ["iteration", "loss"], [[k, float(v)] for k, v in enumerate(losses)])
    if losses:
        print(f"final loss (last 100 mean)\t{np.mean(losses[-100:]):.4f}")


def cmd_train(args):
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.inlier_threshold is not None or args.ransac_iters is not None or args.confidence is not None:
        r = cfg.ransac
        overrides["ransac"] = replace(
            r,
            inlier_threshold=r.inlier_threshold if args.inlier_threshold is None else args.inlier_threshold,
            max_iterations=r.max_iterations if args.ransac_iters is None else args.ransac_iters,
            confidence=r.confidence if args.confidence is None else args.confidence,
        )
    cfg = replace(cfg, **overrides)
    params = load_checkpoint(args.checkpoint) if args.checkpoint else init_params(cfg.seed)
    params, curve = train(read_dataset(args.dataset), params, cfg, checkpoint_path=args.out)
    save_checkpoint(args.out, params)
    if args.curve:
        write_curve(args.curve, curve)
    if curve:
        print(f"mean loss first/last 10%\t{np.mean([c[1] for c in curve[: max(1, len(curve) // 10)]]):.4f}"
              f"\t{np.mean([c[1] for c in curve[-max(1, len(curve) // 10):]]):.4f}")


def cmd_eval_pose(args):
    cfg = _eval_config(args)
    ev = evaluate_pose(read_dataset(args.dataset), _extractor(args, cfg), cfg)
    write_pose_results(args.out, ev)
    if args.stats:
        write_stats(args.stats, ev)
    print("\n".join(summary_lines(ev)))


def cmd_eval_matching(args):
    cfg = _eval_config(args)
    acc, flagged = mean_matching_accuracy(read_dataset(args.dataset), _extractor(args, cfg))
    write_table(args.out, ["threshold_px", "accuracy"], [[int(t), float(a)] for t, a in zip(MMA_THRESHOLDS, acc)])
    for t, a in zip(MMA_THRESHOLDS, acc):
        print(f"MMA@{t}px\t{a:.4f}")
    if flagged:
        print(f"pairs without matches: {', '.join(flagged)}", file=sys.stderr)


def cmd_stats(args):
    cfg = _eval_config(args)
    ev = evaluate_pose(read_dataset(args.dataset), _extractor(args, cfg), cfg)
    write_stats(args.out, ev)
    print("\n".join(summary_lines(ev)))


def cmd_gradcheck(args):
    seed = smooth_seed() if args.seed is None else args.seed
    rep = surrogate_gradcheck(seed, eps=args.eps, size=args.size)
    print(f"seed\t{seed}")
    print(f"max relative error\t{rep.max_rel_error:.3e}\t{rep.worst_parameter}")
    print(f"checked\t{rep.n_checked}\tskipped (|g| <= 1e-10)\t{rep.n_skipped}")
    print(f"smallest ReLU input\t{rep.relu_margin:.3e}")
    return 0 if rep.max_rel_error < 1e-3 else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="reinforced-features", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic two-view dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--planar", action="store_true", help="points on a plane, with exact homographies")
    p.add_argument("--rotation", type=float, default=SceneConfig.rotation_max_deg, help="max rotation in degrees")
    p.add_argument("--baseline-min", type=float, default=SceneConfig.baseline[0])
    p.add_argument("--baseline-max", type=float, default=SceneConfig.baseline[1])
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="supervised warm-up from generator ground truth")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=PretrainConfig.iterations)
    p.add_argument("--lr", type=float, default=PretrainConfig.learning_rate)
    p.add_argument("--curve")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="REINFORCE fine-tuning on the pose loss")
    p.add_argument("--config", help="key=value file mirroring TrainConfig")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", help="starting parameters")
    p.add_argument("--out", required=True)
    p.add_argument("--curve")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--inlier-threshold", type=float)
    p.add_argument("--ransac-iters", type=int)
    p.add_argument("--confidence", type=float)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval-pose", cmd_eval_pose, "per-pair pose errors and AUC"),
        ("eval-matching", cmd_eval_matching, "mean matching accuracy on planar pairs"),
        ("stats", cmd_stats, "keypoint, match and inlier statistics"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _ransac_args(p, 0.02, 1000)
        _eval_args(p)
        p.add_argument("--oracle", action="store_true", help="use generator keypoints instead of the network")
        p.add_argument("--out", required=True)
        if name == "eval-pose":
            p.add_argument("--stats", help="also write the summary statistics table")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of the surrogate gradient")
    p.add_argument("--seed", type=int, help="instance seed (default: first smooth instance)")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--size", type=int, default=16)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return int(args.func(args) or 0)
