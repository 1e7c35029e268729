"""``olive`` command line: benchmarks, obliviousness checks, FL training, attack, trace dumps.

Exit codes: 0 success, 1 failed assertion or attack error, 2 usage or
configuration error. ``--seed`` falls back to the ``OLIVE_SEED`` environment
variable, then to 0.
"""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import attack as atk
from .aggregation import AGGREGATORS, AggregationInput, aggregate, average_and_perturb
from .bench import BENCH_FIELDS, oblivious_check, run_bench
from .flcore import (
    ConfigError,
    build_dataset,
    build_model,
    load_config,
    read_checkpoint,
    read_leak_log,
    train,
    write_checkpoint,
    write_leak_log,
)
from .trace import Tracer, write_trace

ATTACK_FIELDS = ("user", "method", "predicted_labels", "top1", "true_labels")
METRIC_FIELDS = ("round", "test_accuracy", "participants")


class UsageError(Exception):
    pass


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("OLIVE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"OLIVE_SEED must be an integer, got {env!r}") from None


def _check_algo_flags(args):
    if args.algo == "grouped" and args.h is None:
        raise UsageError("--algo grouped requires --h")
    if args.h is not None and args.algo != "grouped":
        raise UsageError("--h only applies to --algo grouped")
    if args.c is not None and args.algo != "baseline":
        raise UsageError("--c only applies to --algo baseline")
    if args.h is not None and args.h < 1:
        raise UsageError("--h must be positive")
    if args.c is not None and args.c < 1:
        raise UsageError("--c must be positive")


def _check_shape(args):
    if args.n < 0 or args.d < 1:
        raise UsageError("--n must be >= 0 and --d >= 1")
    if not 0 < args.alpha <= 1:
        raise UsageError("--alpha must be in (0, 1]")


def cmd_aggregate_bench(args):
    _check_algo_flags(args)
    _check_shape(args)
    if args.repeat < 1 or args.jobs < 1:
        raise UsageError("--repeat and --jobs must be positive")
    records = run_bench(args.algo, args.n, args.d, args.alpha, args.c, args.h, args.repeat, _seed(args), args.jobs)
    w = csv.DictWriter(sys.stdout, fieldnames=BENCH_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow(r.row())
    return 0


def cmd_oblivious_check(args):
    _check_algo_flags(args)
    _check_shape(args)
    if args.pairs < 1:
        raise UsageError("--pairs must be positive")
    ok, report = oblivious_check(args.algo, args.pairs, args.n, args.d, args.alpha, args.c, args.h, _seed(args))
    report["ok"] = ok
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0 if ok else 1


def cmd_fl_train(args):
    overrides = {}
    if args.aggregator:
        overrides["aggregator"] = args.aggregator
    if args.seed is not None or "OLIVE_SEED" in os.environ:
        overrides["seed"] = _seed(args)
    try:
        config = load_config(args.config, **overrides)
    except ConfigError as exc:
        raise UsageError(f"config error: {exc}") from None
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    dataset = build_dataset(config)
    model, leaks, metrics = train(config, dataset)
    out = Path(args.out_dir)
    leak_path = Path(args.leak_out) if args.leak_out else out / "leaks.jsonl"
    model_dir = Path(args.model_out) if args.model_out else out / "checkpoints"
    metrics_path = Path(args.metrics_out) if args.metrics_out else out / "metrics.csv"
    for p in (leak_path.parent, model_dir, metrics_path.parent):
        p.mkdir(parents=True, exist_ok=True)
    write_leak_log(leak_path, leaks)
    for t, theta in enumerate(metrics.checkpoints):
        write_checkpoint(model_dir / f"round_{t:04d}.olvm", theta)
    write_checkpoint(model_dir / "final.olvm", model.theta)
    with open(metrics_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for t, (acc, part) in enumerate(zip(metrics.accuracy, metrics.participants)):
            w.writerow([t, f"{acc:.6f}", part])
    print(f"wrote {leak_path}, {model_dir}, {metrics_path}", file=sys.stderr)
    return 0


def _load_checkpoints(directory, rounds):
    models = {}
    for t in rounds:
        p = Path(directory) / f"round_{t:04d}.olvm"
        if not p.exists():
            raise atk.AttackError(f"missing model for round {t}")
        models[t] = read_checkpoint(p)
    return models


def _labels(s):
    return " ".join(str(x) for x in sorted(s))


def cmd_attack(args):
    if args.known_count is not None and args.known_count < 1:
        raise UsageError("--known-count must be positive")
    if args.cacheline_c < 1:
        raise UsageError("--cacheline-c must be positive")
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        raise UsageError(f"config error: {exc}") from None
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    leaks = read_leak_log(args.leaks)
    observed = atk.user_observations(leaks)
    if not observed:
        raise atk.AttackError("user never observed")
    rounds = sorted({t for r in observed.values() for t in r})
    models = _load_checkpoints(args.checkpoints, rounds)
    dataset = build_dataset(config)
    results = atk.attack_users(
        leaks,
        models,
        dataset.public,
        config.alpha,
        build_model(config, dataset),
        method=args.method,
        known_count=args.known_count,
        granularity=args.cacheline_c,
        truth=dataset.truth(),
        hidden=args.hidden,
        seed=config.seed,
    )
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(ATTACK_FIELDS)
    for r in results:
        w.writerow([r.user, r.method, _labels(r.predicted), r.top1, _labels(r.truth)])
    exact, top1 = atk.evaluate_attack(results)
    print(f"# summary method={args.method} users={len(results)} all={exact:.4f} top1={top1:.4f}")
    return 0


def cmd_trace_dump(args):
    _check_algo_flags(args)
    if args.n < 0 or args.d < 1 or not 0 <= args.k <= args.d:
        raise UsageError("need --n >= 0, --d >= 1 and 0 <= --k <= --d")
    if args.granularity < 1:
        raise UsageError("--granularity must be positive")
    rng = np.random.default_rng(_seed(args))
    idx = np.stack([rng.choice(args.d, args.k, replace=False) for _ in range(args.n)]) if args.n else None
    if idx is None:
        idx = np.zeros((0, args.k), dtype=np.int64)
    val = rng.uniform(-1.0, 1.0, idx.shape).astype(np.float32)
    inp = AggregationInput.from_arrays(idx, val, args.d)
    tracer = Tracer()
    agg = aggregate(inp, args.algo, cacheline_c=args.c or 1, group_h=args.h, tracer=tracer, rng=rng)
    if args.averaging:
        average_and_perturb(agg, max(args.n, 1), 0.0, rng, tracer)
    trace = tracer.trace()
    try:
        write_trace(args.out, trace, args.granularity)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}") from None
    print(f"wrote {len(trace)} events to {args.out}", file=sys.stderr)
    return 0


def _add_algo(p, with_shape=True):
    p.add_argument("--algo", required=True, choices=AGGREGATORS)
    p.add_argument("--n", type=int, required=True, help="number of clients")
    p.add_argument("--d", type=int, required=True, help="model size")
    if with_shape:
        p.add_argument("--alpha", type=float, required=True, help="sparse ratio, k = ceil(alpha * d)")
    p.add_argument("--c", type=int, help="cacheline size (baseline)")
    p.add_argument("--h", type=int, help="group size (grouped)")
    p.add_argument("--seed", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="olive", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("aggregate-bench", help="time an aggregator on random batches, CSV to stdout")
    _add_algo(p)
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_aggregate_bench)

    p = sub.add_parser("oblivious-check", help="compare traces of random same-shape input pairs")
    _add_algo(p)
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_oblivious_check)

    p = sub.add_parser("fl-train", help="simulate DP federated training")
    p.add_argument("--config", required=True)
    p.add_argument("--aggregator", choices=AGGREGATORS)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--leak-out")
    p.add_argument("--model-out", help="directory for per-round checkpoints")
    p.add_argument("--metrics-out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_fl_train)

    p = sub.add_parser("attack", help="infer user labels from a leak log")
    p.add_argument("--config", required=True, help="config used for training (dataset, alpha, model)")
    p.add_argument("--leaks", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--method", choices=atk.METHODS, default="jac")
    p.add_argument("--known-count", type=int)
    p.add_argument("--cacheline-c", type=int, default=1)
    p.add_argument("--hidden", type=int, default=64, help="hidden width of the nn scorers")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("trace-dump", help="write the access trace of one aggregation")
    _add_algo(p, with_shape=False)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--granularity", type=int, default=1)
    p.add_argument("--averaging", action="store_true", help="include the averaging/noise sweeps")
    p.set_defaults(func=cmd_trace_dump)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"olive: error: {exc}", file=sys.stderr)
        return 2
    except atk.AttackError as exc:
        print(f"olive: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
