"""Command line entry point.

    fedlora run CONFIG [--strategy S] [--seed-override K] [--out DIR]
    fedlora sweep-lr CONFIG [--strategy S] [--seed-override K] [--out DIR]
    fedlora verify

Exit status: 0 success, 1 configuration or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import LR_GRID, STRATEGIES, ConfigError, ExperimentConfig, parse_config
from .data import CsvFormatError
from .experiment import prepare, run_experiment, write_log
from .fedcore import Strategy

log = logging.getLogger("fedlora")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


def _selection(cfg: ExperimentConfig, args) -> tuple[list[Strategy], list[int]]:
    names = [args.strategy] if args.strategy else cfg.federation.strategies
    seeds = [args.seed_override] if args.seed_override is not None else cfg.seeds
    return [Strategy(n) for n in names], seeds


def _check_finite(run_log) -> None:
    for m in run_log.rounds:
        if not (math.isfinite(m.train_loss) and math.isfinite(m.test_loss)):
            raise FloatingPointError(f"{run_log.experiment_id}: non-finite loss in round {m.round}")


def cmd_run(args) -> int:
    cfg = parse_config(args.config)
    out = Path(args.out or cfg.output_dir)
    strategies, seeds = _selection(cfg, args)
    for seed in seeds:
        setup = prepare(cfg, seed)
        for strategy in strategies:
            run_log = run_experiment(cfg, strategy, seed, setup=setup)
            _check_finite(run_log)
            csv_path, _ = write_log(run_log, out, f"{strategy.value}_seed{seed}")
            best = run_log.best_test_accuracy
            print(f"{strategy.value} seed={seed} best_acc={'n/a' if best is None else f'{best:.4f}'} -> {csv_path}")
    return EXIT_OK


def _score(run_log) -> tuple[Optional[float], float]:
    losses = [m.test_loss for m in run_log.rounds] or [run_log.initial_test_loss]
    return run_log.best_test_accuracy, min(losses)


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    strategies, seeds = _selection(cfg, args)
    setups = {seed: prepare(cfg, seed) for seed in seeds}
    rows = []
    for lr in LR_GRID:
        lr_cfg = cfg.replace(**{"federation.lr": lr})
        for strategy in strategies:
            accs, losses = [], []
            for seed in seeds:
                run_log = run_experiment(lr_cfg, strategy, seed, setup=setups[seed])
                _check_finite(run_log)
                acc, loss = _score(run_log)
                accs.append(np.nan if acc is None else acc)
                losses.append(loss)
            row = {"lr": lr, "strategy": strategy.value, "mean_best_test_accuracy": float(np.mean(accs)),
                   "mean_min_test_loss": float(np.mean(losses))}
            rows.append(row)
            print(f"lr={lr:g} {strategy.value} acc={row['mean_best_test_accuracy']:.4f} "
                  f"loss={row['mean_min_test_loss']:.6g}")

    path = out / "sweep_lr.csv"
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
    for strategy in strategies:
        mine = [r for r in rows if r["strategy"] == strategy.value]
        if cfg.task.kind == "lowrank_regression":
            best = min(mine, key=lambda r: r["mean_min_test_loss"])
        else:
            best = max(mine, key=lambda r: r["mean_best_test_accuracy"])
        print(f"best {strategy.value}: lr={best['lr']:g}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    return EXIT_OK if run_all() else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedlora", description="Federated LoRA fine-tuning simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, helptext in [("run", cmd_run, "run every (strategy, seed) in a config"),
                               ("sweep-lr", cmd_sweep, "grid search over the learning-rate set")]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config")
        p.add_argument("--strategy", choices=STRATEGIES)
        p.add_argument("--seed-override", type=int)
        p.add_argument("--out")
        p.set_defaults(func=fn)
    p = sub.add_parser("verify", help="run the built-in invariant checks")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            return args.func(args)
    except (ConfigError, CsvFormatError, FileNotFoundError, IsADirectoryError) as err:
        log.error("%s", err)
        return EXIT_CONFIG
    except FloatingPointError as err:
        log.error("numerical failure: %s", err)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
