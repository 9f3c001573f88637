"""Command-line entry point.

Subcommands: run (one seeded run to run.csv), grid (sweep an experiment
file to grid.csv), verify (participation pattern diagnostics to
verify.csv), partition-report (label histogram of the client shards),
datagen (write a synthetic IDX dataset).

Exit codes: 0 on success with no failed check, 1 when verify finds a
failed check, 2 on any error.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import replace

from .core import (
    ConfigError,
    PATTERNS,
    apply_overrides,
    build_run_config,
    format_value,
    parse_config_text,
    parse_experiment_text,
)
from .data import _atomic_write, label_histogram, make_blobs, partition_by_similarity, save_idx
from .diagnostics import assumption_suite, checks_to_csv_rows, format_report
from .harness import best_cell, load_dataset, rounds_to_target, run_grid, run_once, write_grid_csv, write_run_csv
from .participation import (
    CyclicScheduler,
    GroupedCyclicScheduler,
    IidScheduler,
    RegularizedScheduler,
    ScaScheduler,
    Scheduler,
)


def _load_values(args: argparse.Namespace) -> dict[str, str]:
    with open(args.config, "r", encoding="utf-8") as fh:
        text = fh.read()
    return apply_overrides(parse_config_text(text), args.override)


def _out_path(args: argparse.Namespace, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def cmd_run(args: argparse.Namespace) -> int:
    values = _load_values(args)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    cfg = build_run_config(values)
    record = run_once(cfg, threads=args.threads)
    path = _out_path(args, "run.csv")
    write_run_csv(record, path)

    print(f"run: algorithm={cfg.algorithm} objective={cfg.objective} pattern={cfg.pattern}"
          f" rounds={cfg.rounds} eta={format_value(cfg.eta)} gamma={format_value(cfg.gamma)}"
          f" mu={format_value(cfg.mu)} seed={cfg.seed}")
    if record.rounds:
        print(f"final: round={record.rounds[-1]} train_loss={format_value(record.final_loss)}"
              f" grad_norm={format_value(record.grad_norms[-1])}"
              f" test_metric={format_value(record.test_metrics[-1])}"
              f" uplink_scalars={record.uplink_scalars[-1]}")
    else:
        print("final: no finite evaluation")
    if not math.isnan(cfg.target_value):
        hit = rounds_to_target(record, cfg.target_value)
        print(f"rounds_to_target: {hit if hit is not None else 'none'}")
    if record.diverged:
        print("warning: trajectory left the finite range and was truncated.")
    print(f"wrote {path}")
    return 0


def cmd_grid(args: argparse.Namespace) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        spec = parse_experiment_text(fh.read())
    if args.override:
        spec = replace(spec, base=apply_overrides(spec.base, args.override))
    if args.seed is not None:
        spec = replace(spec, seeds=[args.seed])
    results = run_grid(spec, threads=args.threads)
    grid_keys = list(spec.grid)
    path = _out_path(args, "grid.csv")
    write_grid_csv(results, grid_keys, path)

    print(f"grid: {len(results)} cells x {len(spec.seeds)} seeds")
    for cell in results:
        desc = " ".join(f"{k}={cell.overrides[k]}" for k in grid_keys)
        print(f"cell {cell.cell_id}: {desc} mean_final_loss={format_value(cell.mean_final_loss)}"
              f" std={format_value(cell.std_final_loss)}"
              f" mean_rounds_to_target={format_value(cell.mean_rounds_to_target)}")
    best = best_cell(results)
    best_desc = " ".join(f"{k}={best.overrides[k]}" for k in grid_keys)
    print(f"best: cell {best.cell_id} {best_desc}"
          f" mean_final_loss={format_value(best.mean_final_loss)}")
    print(f"wrote {path}")
    return 0


def _scheduler_from_args(args: argparse.Namespace) -> Scheduler:
    if args.pattern == "iid":
        return IidScheduler(args.n, args.s)
    if args.pattern == "cyclic":
        return CyclicScheduler(args.n, args.k_bar, args.s)
    if args.pattern == "grouped_cyclic":
        return GroupedCyclicScheduler(args.n, args.k_bar, args.s, args.g)
    if args.pattern == "regularized":
        return RegularizedScheduler(args.n, args.window_p)
    return ScaScheduler(args.n, args.k_bar, args.s, args.g, args.p_active, args.p_inactive)


def cmd_verify(args: argparse.Namespace) -> int:
    if args.trials < 1:
        raise ConfigError("trials must be >= 1.")
    scheduler = _scheduler_from_args(args)
    checks = assumption_suite(scheduler, args.trials, seed=args.seed)
    print(format_report(checks))
    path = _out_path(args, "verify.csv")
    _atomic_write(path, ("\n".join(checks_to_csv_rows(checks)) + "\n").encode())
    print(f"wrote {path}")
    return 0 if all(c.passed for c in checks) else 1


def cmd_partition_report(args: argparse.Namespace) -> int:
    values = _load_values(args)
    cfg = build_run_config(values)
    if cfg.objective != "logistic":
        raise ConfigError("partition-report needs a config with objective = logistic.")
    train, _ = load_dataset(cfg)
    shards = partition_by_similarity(train[0], train[1], cfg.n_clients, cfg.similarity, cfg.seed)
    rows = label_histogram(shards)
    path = _out_path(args, "partition.csv")
    lines = ["client,label,count"] + [f"{c},{label},{n}" for c, label, n in rows]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())

    sizes = [len(labels) for _, labels in shards]
    print(f"partition: {cfg.n_clients} clients, {len(train[1])} samples,"
          f" similarity={format_value(cfg.similarity)}")
    print(f"shard sizes: min={min(sizes)} max={max(sizes)}")
    print(f"wrote {path}")
    return 0


def cmd_datagen(args: argparse.Namespace) -> int:
    features, labels = make_blobs(args.samples, args.classes, args.features, args.seed)
    written = [_out_path(args, "train-images.idx"), _out_path(args, "train-labels.idx")]
    save_idx(written[0], written[1], features, labels)
    if args.test_samples > 0:
        test_features, test_labels = make_blobs(args.test_samples, args.classes,
                                                args.features, args.seed, stream_index=2)
        written.extend([_out_path(args, "test-images.idx"), _out_path(args, "test-labels.idx")])
        save_idx(written[2], written[3], test_features, test_labels)
    for path in written:
        print(f"wrote {path}")
    return 0


def _add_common(sub: argparse.ArgumentParser, config_required: bool = True) -> None:
    if config_required:
        sub.add_argument("--config", required=True, help="config file path")
        sub.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                         help="override a config key; repeatable, later wins")
    sub.add_argument("--out", default=".", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Deterministic simulator for federated optimization under periodic client participation.")
    subs = parser.add_subparsers(dest="command", required=True)

    run = subs.add_parser("run", help="execute one seeded run and write run.csv")
    _add_common(run)
    run.add_argument("--threads", type=int, default=1, help="worker threads for client updates")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.set_defaults(func=cmd_run)

    grid = subs.add_parser("grid", help="run an experiment grid and write grid.csv")
    _add_common(grid)
    grid.add_argument("--threads", type=int, default=1)
    grid.add_argument("--seed", type=int, default=None, help="replace the seed list with one seed")
    grid.set_defaults(func=cmd_grid)

    verify = subs.add_parser("verify", help="participation diagnostics; exit 1 on a failed check")
    verify.add_argument("--pattern", required=True, choices=PATTERNS)
    verify.add_argument("--n", type=int, required=True, help="number of clients")
    verify.add_argument("--s", type=int, default=1, help="clients sampled per round")
    verify.add_argument("--k-bar", type=int, default=1, help="number of cyclic groups")
    verify.add_argument("--g", type=int, default=1, help="rounds each group stays eligible")
    verify.add_argument("--window-p", type=int, default=0, help="round-robin window length")
    verify.add_argument("--p-active", type=float, default=0.8)
    verify.add_argument("--p-inactive", type=float, default=0.05)
    verify.add_argument("--trials", type=int, default=10000, help="windows to sample")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--out", default=".")
    verify.set_defaults(func=cmd_verify)

    report = subs.add_parser("partition-report", help="label histogram of the client shards")
    _add_common(report)
    report.set_defaults(func=cmd_partition_report)

    datagen = subs.add_parser("datagen", help="write a synthetic IDX classification dataset")
    datagen.add_argument("--out", default=".")
    datagen.add_argument("--samples", type=int, default=1000)
    datagen.add_argument("--classes", type=int, default=10)
    datagen.add_argument("--features", type=int, default=8)
    datagen.add_argument("--seed", type=int, default=0)
    datagen.add_argument("--test-samples", type=int, default=0)
    datagen.set_defaults(func=cmd_datagen)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
