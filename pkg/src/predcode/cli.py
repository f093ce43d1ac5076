"""Command-line entry points: ``predcode {train,bench,phases,eval,make-data}``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from .bench import (
    lasso_reference,
    make_oscillation_problem,
    make_rate_problem,
    parse_schedule,
    run_schedules,
    write_rates,
    write_traces,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_stages
from .data import ZCAWhitener, load_dataset, synth_bars, write_digits_idx, write_idx, IDX_NAMES
from .diagnostics import PhaseTracker, measure_rate, write_timeline
from .evaluation import backproject_fields, export_fields, filter_similarity, knn_classify, write_matrix_csv
from .exceptions import ConfigError, FormatError, ShapeError
from .network import PredictiveCodingNetwork, write_history
from .ops import _convolve
from .schedules import RestartPolicy
from .state import StateProblem, infer_states

log = logging.getLogger("predcode")


def _config(args):
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", args.seed)
    if getattr(args, "stages", None):
        cfg.set("stages", args.stages)
    if getattr(args, "schedule", None) and "," not in args.schedule:
        cfg.set("schedule.kind", args.schedule)
    return cfg.validate()


def _require_dir(path, what="data directory"):
    if not path or not os.path.isdir(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def cmd_train(args):
    cfg = _config(args)
    _require_dir(args.data)
    train = load_dataset(args.data, "train", cfg.train_limit)
    whitener = ZCAWhitener(cfg.whiten_eps).fit(train.images)
    X = whitener.transform(train.images)
    net = PredictiveCodingNetwork(**cfg.network)
    net.fit(X)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(net, os.path.join(args.out, "model.ckpt"), whitening=whitener.whitening_)
    write_history(net.history_, os.path.join(args.out, "metrics.csv"))
    if args.trace:
        results = net.forward_infer(X[: net.batch_size])
        for i, r in enumerate(results, start=1):
            r.state_report.write_trace(os.path.join(args.out, f"trace_stage{i}_states.csv"))
            r.cause_report.write_trace(os.path.join(args.out, f"trace_stage{i}_causes.csv"))
    print(f"trained {len(net.stages_)} stage(s) on {X.shape[0]} images; outputs in {args.out}")
    return 0


def cmd_bench(args):
    schedules = (args.schedule or "plain,nesterov,polynomial:2:3,polynomial:3:3").split(",")
    for name in schedules:
        parse_schedule(name)
    seed = 0 if args.seed is None else args.seed
    if args.problem == "rate":
        problem = make_rate_problem(seed)
    else:
        problem = make_oscillation_problem(seed)
    restart = RestartPolicy(args.restart)
    _, optimum, violation = lasso_reference(problem)
    reports = run_schedules(problem, schedules, restart, max_iters=args.iters)
    os.makedirs(args.out, exist_ok=True)
    write_traces(reports, os.path.join(args.out, "traces.csv"))
    rows = []
    for name, report in reports.items():
        gaps = np.asarray(report.cost_trace) - optimum
        hit = int(np.argmax(gaps <= args.gap)) if np.any(gaps <= args.gap) else None
        try:
            slope = measure_rate(report.cost_trace, optimum, (10, 1000))
        except ValueError:
            slope = None
        rows.append((name, slope, hit))
    write_rates(rows, os.path.join(args.out, "rates.csv"))
    for name, slope, hit in rows:
        shown = "n/a" if slope is None else f"{slope:.3f}"
        print(f"{name:>16}: slope {shown}, gap {args.gap:g} at iteration {hit}")
    print(f"reference optimum {optimum!r} (optimality violation {violation:.1e})")
    return 0


def _phase_input(args, net, whitening, grid):
    if args.data:
        _require_dir(args.data)
        ds = load_dataset(args.data, "train", 1)
        image = ds.images[:1]
        if whitening is not None:
            image = whitening.apply(image)
    else:
        image = synth_bars(1, max(grid, 4), 0 if args.seed is None else args.seed).images
    h, w = image.shape[2:]
    if grid > min(h, w):
        raise ShapeError(f"grid {grid} exceeds the {h}x{w} input")
    top, left = (h - grid) // 2, (w - grid) // 2
    return np.ascontiguousarray(image[:, :, top : top + grid, left : left + grid])


def cmd_phases(args):
    net, whitening = load_checkpoint(args.checkpoint, with_whitening=True)
    stage = net.stages_[0]
    grid = args.grid
    image = _phase_input(args, net, whitening, grid)
    os.makedirs(args.out, exist_ok=True)
    schedules = (args.schedule or "polynomial,nesterov").split(",")
    field = 2.0 * stage.alpha_prime * stage.state_lambda
    for name in schedules:
        tracker = PhaseTracker(stage.D, (grid, grid))
        problem = StateProblem(image, stage.D, field, mu=stage.mu)
        infer_states(problem, parse_schedule(name), RestartPolicy(args.restart), args.iters, callback=tracker)
        path = os.path.join(args.out, f"phases_{name.replace(':', '_')}.csv")
        write_timeline(tracker.rows, path)
        first_pair = next((r["iteration"] for r in tracker.rows if r["complex_pair"]), None)
        print(f"{name}: {len(tracker.rows)} iterations, first complex pair at {first_pair}; {path}")
    return 0


def _stage_reconstruction(net, X):
    err = np.zeros(len(net.stages_))
    energy = np.zeros(len(net.stages_))
    for start in range(0, X.shape[0], net.batch_size):
        for i, r in enumerate(net.forward_infer(X[start : start + net.batch_size])):
            residual = r.input - _convolve(net.stages_[i].D, r.states, "synth")
            err[i] += np.sum(residual**2)
            energy[i] += np.sum(r.input**2)
    return [100.0 * e / en if en > 0 else float("nan") for e, en in zip(err, energy)]


def cmd_eval(args):
    net, whitening = load_checkpoint(args.checkpoint, with_whitening=True)
    cfg = load_config(args.config) if args.config else RunConfig()
    _require_dir(args.data)
    train = load_dataset(args.data, "train", cfg.train_limit)
    try:
        test = load_dataset(args.data, "test", cfg.test_limit)
    except FileNotFoundError:
        test = None
    if whitening is None:
        whitening = ZCAWhitener(cfg.whiten_eps).fit(train.images).whitening_
    Xtr = whitening.apply(train.images)
    Xte = whitening.apply(test.images) if test is not None else Xtr
    os.makedirs(args.out, exist_ok=True)

    recon = _stage_reconstruction(net, Xte)
    with open(os.path.join(args.out, "reconstruction.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "mse_percent"])
        for i, value in enumerate(recon, start=1):
            writer.writerow([i, repr(float(value))])

    labelled = test is not None and train.labels is not None and test.labels is not None
    if labelled:
        tr_stages = net.transform_stages(Xtr)
        te_stages = net.transform_stages(Xte)
        rows = [("raw_pixels", knn_classify(Xtr, train.labels, Xte, cfg.knn_k, test.labels)[1])]
        for depth in range(1, len(tr_stages) + 1):
            ftr = np.concatenate(tr_stages[:depth], axis=1)
            fte = np.concatenate(te_stages[:depth], axis=1)
            name = "+".join(f"stage{j}" for j in range(1, depth + 1))
            rows.append((name, knn_classify(ftr, train.labels, fte, cfg.knn_k, test.labels)[1]))
        with open(os.path.join(args.out, "knn.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["features", "k", "error"])
            for name, error in rows:
                writer.writerow([name, cfg.knn_k, repr(float(error))])
        for name, error in rows:
            print(f"{name:>20}: {cfg.knn_k}-NN error {100 * error:.2f}%")
    else:
        print("labels or test split missing; classification skipped", file=sys.stderr)

    fields_dir = os.path.join(args.out, "fields")
    for s in range(1, len(net.stages_) + 1):
        fields, degenerate = backproject_fields(net, s)
        export_fields(fields, fields_dir, s, degenerate)
        if len(fields) >= 2 and not np.all(degenerate):
            sim, kept = filter_similarity(fields)
            write_matrix_csv(os.path.join(args.out, f"similarity_stage{s}.csv"), sim, [int(k) for k in kept])
    for i, value in enumerate(recon, start=1):
        print(f"stage {i} reconstruction error {value:.2f}%")
    return 0


def cmd_make_data(args):
    seed = 0 if args.seed is None else args.seed
    if args.kind == "digits":
        write_digits_idx(args.out, args.train, args.test, seed=seed)
    else:
        os.makedirs(args.out, exist_ok=True)
        for split, count, offset in (("train", args.train, 0), ("test", args.test, 1)):
            ds = synth_bars(count, args.size, seed + offset)
            write_idx(os.path.join(args.out, IDX_NAMES[f"{split}_images"]), (ds.images[:, 0] * 255).astype(np.uint8))
            write_idx(os.path.join(args.out, IDX_NAMES[f"{split}_labels"]), ds.labels.astype(np.uint8))
    print(f"wrote {args.kind} data to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="predcode", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data")

    p = sub.add_parser("train", help="train a network and write a checkpoint")
    common(p)
    p.add_argument("--stages", help="override stage sizes, e.g. 32:64,64:128")
    p.add_argument("--schedule", help="inertial schedule kind")
    p.add_argument("--trace", action="store_true", help="write solver traces for one batch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="compare inertial schedules on a seeded LASSO problem")
    common(p, data=False)
    p.add_argument("--schedule", help="comma-separated list, e.g. nesterov,polynomial:3:3")
    p.add_argument("--problem", choices=("rate", "oscillation"), default="rate")
    p.add_argument("--restart", choices=("function_value", "none"), default="function_value")
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--gap", type=float, default=1e-8)
    p.add_argument("--trace", action="store_true", help="accepted for symmetry; traces are always written")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("phases", help="phase timeline of stage-1 state inference")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--schedule", help="comma-separated list (default polynomial,nesterov)")
    p.add_argument("--restart", choices=("function_value", "none"), default="none")
    p.add_argument("--iters", type=int, default=300)
    p.set_defaults(func=cmd_phases)

    p = sub.add_parser("eval", help="kNN, reconstruction error and receptive fields")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-data", help="write an IDX fixture (bars or upsampled digits)")
    p.add_argument("--kind", choices=("bars", "digits"), default="digits")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--test", type=int, default=500)
    p.add_argument("--size", type=int, default=8, help="bar image size")
    p.set_defaults(func=cmd_make_data)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (FormatError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
