"""Command-line entry point: synth, train, track, eval, gradcheck, info.

Exit codes: 0 success, 1 usage error (bad arguments or configuration),
2 data error (datasets, weights), 3 check failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import __version__
from .checks import composed_stage_loss_check
from .config import (
    ConfigError,
    RunConfig,
    parse_config,
    parse_scene_spec,
    to_tracker_config,
)
from .numerics import run_primitive_suite
from .synthdata import DatasetError

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(path)


def _cmd_synth(args) -> int:
    from .synthdata import generate_dataset, write_dataset

    family = parse_scene_spec(args.spec)
    sequences = generate_dataset(family, args.seed)
    write_dataset(args.out, sequences)
    total = sum(len(s.frames) for s in sequences)
    print(f"wrote {len(sequences)} sequences ({total} frames) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .synthdata import read_dataset
    from .tracker import make_training_samples, save_weights, train_model

    run_cfg = _load_run_config(args.config)
    cfg = to_tracker_config(run_cfg)
    sequences = read_dataset(args.data)
    if not sequences:
        raise DatasetError(f"{args.data}: empty dataset")
    samples = make_training_samples(sequences, cfg, cfg.seed)
    if not samples:
        raise DatasetError(f"{args.data}: no usable training pairs")
    model, trace = train_model(samples, cfg, cfg.seed, max_steps=args.steps)
    save_weights(args.out, model)
    if trace:
        print(
            f"trained {len(trace)} steps: loss {trace[0]['total']:.4f} -> "
            f"{trace[-1]['total']:.4f}"
        )
    else:
        print("trained 0 steps")
    print(f"wrote weights to {args.out}")
    return 0


def _cmd_track(args) -> int:
    from .geometry import tracking_metrics
    from .synthdata import read_dataset, write_boxes
    from .tracker import (
        BenchmarkResult,
        TrackerNet,
        load_weights,
        track_sequence,
        write_metrics_csv,
    )

    run_cfg = _load_run_config(args.config)
    cfg = to_tracker_config(run_cfg)
    model = TrackerNet(cfg)
    load_weights(args.weights, model)
    sequences = read_dataset(args.data)
    if not sequences:
        raise DatasetError(f"{args.data}: empty dataset")

    per_sequence = []
    for seq in sequences:
        result = track_sequence(seq.frames, seq.boxes[0], model, cfg)
        write_boxes(os.path.join(args.data, seq.name, "pred.boxes"), result.boxes)
        per_sequence.append(
            (seq.name, len(seq.frames), tracking_metrics(result.boxes, seq.boxes))
        )
    total = sum(frames for _n, frames, _m in per_sequence)
    success = sum(f * m.success for _n, f, m in per_sequence) / total
    precision = sum(f * m.precision for _n, f, m in per_sequence) / total
    bench = BenchmarkResult(per_sequence, success, precision, total)
    write_metrics_csv(args.out, bench)
    print(
        f"tracked {len(sequences)} sequences: Success {bench.mean_success:.2f}, "
        f"Precision {bench.mean_precision:.2f}"
    )
    print(f"wrote metrics to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .geometry import tracking_metrics
    from .synthdata import read_boxes
    from .tracker import BenchmarkResult, write_metrics_csv

    gt_names = sorted(
        name
        for name in os.listdir(args.gt)
        if os.path.isfile(os.path.join(args.gt, name, "gt.boxes"))
    ) if os.path.isdir(args.gt) else None
    if gt_names is None:
        raise DatasetError(f"{args.gt}: not a directory")
    if not gt_names:
        raise DatasetError(f"{args.gt}: no sequences with gt.boxes")
    per_sequence = []
    for name in gt_names:
        gt = read_boxes(os.path.join(args.gt, name, "gt.boxes"))
        pred_path = os.path.join(args.pred, name, "pred.boxes")
        if not os.path.isfile(pred_path):
            raise DatasetError(f"{pred_path}: missing predictions")
        pred = read_boxes(pred_path)
        if len(pred) != len(gt):
            raise DatasetError(
                f"{pred_path}: {len(pred)} predictions for {len(gt)} frames"
            )
        per_sequence.append((name, len(gt), tracking_metrics(pred, gt)))
    total = sum(frames for _n, frames, _m in per_sequence)
    success = sum(f * m.success for _n, f, m in per_sequence) / total
    precision = sum(f * m.precision for _n, f, m in per_sequence) / total
    write_metrics_csv(
        args.out, BenchmarkResult(per_sequence, success, precision, total)
    )
    print(f"Success {success:.2f}, Precision {precision:.2f} over {total} frames")
    print(f"wrote metrics to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    failed = False
    for name, err in run_primitive_suite():
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        failed |= status == "FAIL"
        print(f"{name}: max_rel_err={err:.3e} {status}")
    err = composed_stage_loss_check()
    status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
    failed |= status == "FAIL"
    print(f"composed_stage_loss: max_rel_err={err:.3e} {status}")
    return 3 if failed else 0


def _cmd_info(args) -> int:
    from .tracker import TrackerNet

    run_cfg = _load_run_config(args.config)
    cfg = to_tracker_config(run_cfg)
    print(f"n_template = {cfg.n_template}")
    print(f"n_search = {cfg.n_search}")
    print(f"heads = {cfg.heads}")
    print(f"channels = {','.join(str(c) for c in cfg.channels)}")
    print(f"tokens = {','.join(str(t) for t in cfg.tokens)}")
    print(f"knn_k = {cfg.knn_k}")
    print(f"head_channels = {cfg.head_channels}")
    print(f"voxel = {run_cfg.voxel:g}")
    print(f"grid = {cfg.grid.n_x},{cfg.grid.n_y},{cfg.grid.n_z}")
    print(f"epochs = {cfg.epochs}")
    print(f"batch = {cfg.batch}")
    print(f"lr = {cfg.lr:g}")
    print(f"lr_decay = {cfg.lr_decay:g}")
    print(f"lr_decay_every = {cfg.lr_decay_every}")
    model = TrackerNet(cfg)
    counts = model.parameter_counts()
    for key in ("backbone", "fusion", "decoder", "total"):
        print(f"params.{key} = {counts[key]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="synctrack", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="scene family spec file")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--seed", required=True, type=int)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", help="run configuration file (defaults apply)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="weights output file")
    p.add_argument("--steps", type=int, help="cap the number of optimizer steps")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("track", help="run the tracker over a dataset")
    p.add_argument("--config", help="run configuration file (defaults apply)")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="metrics CSV output path")
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory with seq_*/pred.boxes")
    p.add_argument("--gt", required=True, help="directory with seq_*/gt.boxes")
    p.add_argument("--out", required=True, help="metrics CSV output path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("info", help="print configuration and parameter counts")
    p.add_argument("--config", help="run configuration file (defaults apply)")
    p.set_defaults(func=_cmd_info)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"synctrack: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, OSError) as exc:
        print(f"synctrack: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # weights mismatches and malformed inputs surface as data errors
        print(f"synctrack: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
