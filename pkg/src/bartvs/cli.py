"""Command-line entry points: ``select``, ``simulate`` and ``diagnose``.

Each command writes a JSON report (sorted keys, the resolved configuration
embedded, wall time isolated under ``timing``) and optionally a flat CSV.
Files are written to a temporary name and renamed, so a failed run never
leaves a partial report behind.

Exit codes: 0 success, 2 invalid input or configuration, 3 failure while running.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import datagen
from .harness import (
    METRIC_FIELDS, PRIOR_KINDS, SimulationSettings, run_diagnostic, run_simulation, scenario_grid,
)
from .inclusion import NoSplitsError
from .model import DataError, Hyperparams, read_dataset
from .selection import CV_BEST, DEFAULT_ALPHA, DEFAULT_P, STRATEGIES, run_selection, select_cv_best
from .split_prior import C_GRID, PriorSpec, compute_weights, read_prior_file, uniform_weights

log = logging.getLogger("bartvs")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
STRATEGY_CHOICES = STRATEGIES + (CV_BEST,)


class ConfigError(ValueError):
    """Invalid or inconsistent command-line configuration."""


# ------------------------------------------------------------------ output


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def render_report(report: dict) -> str:
    return json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n"


def atomic_write(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (";".join(map(str, v)) if isinstance(v, list) else v) for k, v in r.items()})
    return buf.getvalue()


def _emit(args, report: dict, csv_rows: list[dict] | None, columns: list[str] | None) -> None:
    outputs = [(args.out, render_report(report))]
    if args.csv and csv_rows is not None:
        outputs.append((args.csv, csv_text(csv_rows, columns)))
    for path, _ in outputs:
        if not Path(path).resolve().parent.is_dir():
            raise ConfigError(f"output directory for {path} does not exist")
    for path, text in outputs:
        atomic_write(path, text)


# ------------------------------------------------------------------ parsing


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(choices):
    def parse(text: str) -> list[str]:
        items = [t.strip() for t in text.split(",") if t.strip()]
        bad = [t for t in items if t not in choices]
        if bad or not items:
            raise argparse.ArgumentTypeError(f"choose from {', '.join(choices)}")
        return items
    return parse


def _add_chain_flags(p: argparse.ArgumentParser, restarts: int = 5) -> None:
    d = Hyperparams()
    g = p.add_argument_group("sampler")
    g.add_argument("--trees", type=int, default=d.m, help="trees in the ensemble (default %(default)s)")
    g.add_argument("--burn", type=int, default=d.n_burn, help="burn-in sweeps per chain")
    g.add_argument("--post", type=int, default=d.n_post, help="retained sweeps per chain")
    g.add_argument("--restarts", type=int, default=restarts, help="chains averaged per fit")
    g.add_argument("--seed", type=int, default=0, help="master seed")
    g.add_argument("--workers", type=int, default=1, help="worker processes (0 = all CPUs)")


def _add_selection_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("selection")
    g.add_argument("--permutations", type=int, default=DEFAULT_P, help="permutation runs P")
    g.add_argument("--perm-restarts", type=int, default=1, help="chains averaged per permutation")
    g.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    g.add_argument("--folds", type=int, default=5, help="cross-validation folds for --strategy cv")


def _add_output_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--csv", help="optional CSV path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bartvs", description="BART variable selection")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("select", help="select variables on a dataset")
    s.add_argument("--data", required=True, help="delimited file with a header row")
    s.add_argument("--response-col", required=True)
    s.add_argument("--strategy", choices=STRATEGY_CHOICES, default=CV_BEST)
    s.add_argument("--prior-file", help="two-column file: variable name, prior probability")
    s.add_argument("--c-grid", type=_float_list, help="prior influence values (default %s with a prior)"
                   % ",".join(f"{c:g}" for c in C_GRID))
    s.add_argument("--clamp-prior", action="store_true", help="truncate prior probabilities to [0.05, 0.95]")
    _add_chain_flags(s)
    _add_selection_flags(s)
    _add_output_flags(s)

    m = sub.add_parser("simulate", help="score selection strategies on simulated data")
    m.add_argument("--scenario", choices=datagen.KINDS, default=datagen.FRIEDMAN)
    m.add_argument("--n", type=int, default=datagen.DEFAULT_N)
    m.add_argument("--p", type=_int_list, default=[25], help="comma list of predictor counts")
    m.add_argument("--p0", type=_int_list, default=None, help="comma list of true-set sizes")
    m.add_argument("--sigma-sq", type=_float_list, default=[1.0], help="comma list of noise variances")
    m.add_argument("--replicates", type=int, default=10)
    m.add_argument("--strategies", type=_str_list(STRATEGY_CHOICES), default=list(STRATEGIES))
    m.add_argument("--priors", type=_str_list(PRIOR_KINDS), default=["none"],
                   help="doubled-weight priors to compare: none, correct, incorrect")
    m.add_argument("--prior-c", type=float, default=1.0, help="c for the doubled-weight priors")
    _add_chain_flags(m)
    _add_selection_flags(m)
    _add_output_flags(m)

    d = sub.add_parser("diagnose", help="restart variance of inclusion proportions on null data")
    d.add_argument("--datasets", type=int, default=10, help="null datasets I")
    d.add_argument("--n", type=int, default=datagen.DEFAULT_N)
    d.add_argument("--p", type=int, default=40)
    _add_chain_flags(d)
    _add_output_flags(d)
    return parser


def _hyperparams(args) -> Hyperparams:
    try:
        return Hyperparams(m=args.trees, n_burn=args.burn, n_post=args.post, n_restarts=args.restarts)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _check_selection_args(args) -> None:
    if args.permutations < 2:
        raise ConfigError("--permutations must be at least 2")
    if args.perm_restarts < 1:
        raise ConfigError("--perm-restarts must be at least 1")
    if not 0 < args.alpha < 1:
        raise ConfigError("--alpha must lie in (0, 1)")
    if args.folds < 2:
        raise ConfigError("--folds must be at least 2")
    if args.workers < 0:
        raise ConfigError("--workers must be >= 0")
    if args.seed < 0:
        raise ConfigError("--seed must be >= 0")


def _config(args, hp: Hyperparams, **extra) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    cfg["hyperparams"] = hp.to_dict()
    cfg.update(extra)
    return cfg


# ----------------------------------------------------------------- commands


def cmd_select(args) -> tuple[dict, list[dict], list[str]]:
    hp = _hyperparams(args)
    _check_selection_args(args)
    if args.c_grid is not None:
        if not args.prior_file:
            raise ConfigError("--c-grid needs --prior-file")
        if not args.c_grid or any(c < 0 for c in args.c_grid):
            raise ConfigError("--c-grid needs one or more values >= 0")
    if args.prior_file and args.strategy != CV_BEST and (args.c_grid is None or len(args.c_grid) != 1):
        raise ConfigError("with a prior and a fixed strategy, give exactly one value via --c-grid")
    dataset = read_dataset(args.data, args.response_col)
    prior = None
    if args.prior_file:
        prior = PriorSpec(read_prior_file(args.prior_file, dataset.names, clamp=args.clamp_prior))
    c_grid = args.c_grid if args.c_grid is not None else ([0.0] if prior is None else list(C_GRID))

    t0 = time.perf_counter()
    if args.strategy == CV_BEST:
        best, run = select_cv_best(dataset, hp, prior, c_grid, args.folds, args.alpha,
                                   args.permutations, args.seed, STRATEGIES, args.perm_restarts,
                                   args.workers)
        c_used = best.metadata["cv_c"]
    else:
        c_used = c_grid[0]
        weights = uniform_weights(dataset.K) if prior is None else compute_weights(prior.with_c(c_used))
        run = run_selection(dataset, hp, weights, args.alpha, args.permutations, args.seed,
                            STRATEGIES, args.perm_restarts, args.workers)
        best = run.results[args.strategy]
    elapsed = time.perf_counter() - t0

    names = list(dataset.names)
    strategies = {s: r.to_dict(names) for s, r in run.results.items()}
    strategies[best.strategy] = best.to_dict(names)
    variables = []
    for k, name in enumerate(names):
        row = {"variable": name, "index": k, "proportion": float(run.proportions[k]),
               "null_mean": float(run.null.rows[:, k].mean())}
        if prior is not None:
            row["prior_probability"] = float(prior.probabilities[k])
        for s, r in run.results.items():
            row[f"threshold_{s}"] = float(r.thresholds[k])
            row[f"selected_{s}"] = k in r.selected
        variables.append(row)
    report = {
        "command": "select",
        "config": _config(args, hp, c_grid=c_grid),
        "n": dataset.n, "K": dataset.K, "names": names,
        "strategy": args.strategy,
        "selected": [names[k] for k in best.selected],
        "c": c_used,
        "cv": ({"strategy": best.metadata["cv_strategy"], "c": best.metadata["cv_c"],
                "errors": best.metadata["cv_errors"]} if args.strategy == CV_BEST else None),
        "proportions": run.proportions,
        "restart_proportions": run.restart_proportions,
        "null": {"P": run.null.P, "n_flagged": run.null.n_flagged,
                 "column_mean": run.null.rows.mean(axis=0)},
        "strategies": strategies,
        "variables": variables,
        "timing": {"seconds": elapsed},
    }
    columns = list(variables[0].keys())
    return report, variables, columns


def cmd_simulate(args) -> tuple[dict, list[dict], list[str]]:
    hp = _hyperparams(args)
    _check_selection_args(args)
    p0s = args.p0
    if p0s is None:
        p0s = {datagen.NULL: [0], datagen.FRIEDMAN: [5]}.get(args.scenario, [5])
    if args.replicates < 1:
        raise ConfigError("--replicates must be at least 1")
    try:
        cells = scenario_grid(args.scenario, args.n, args.p, p0s, args.sigma_sq)
        settings = SimulationSettings(hp, tuple(args.strategies), args.alpha, args.permutations,
                                      args.folds, args.perm_restarts, tuple(args.priors), args.prior_c)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    def progress(c, r):
        log.info("cell %d replicate %d done", c, r)

    t0 = time.perf_counter()
    rows, summary = run_simulation(cells, args.replicates, settings, args.seed, args.workers, progress)
    elapsed = time.perf_counter() - t0
    report = {
        "command": "simulate",
        "config": _config(args, hp, p0=p0s, settings=settings.to_dict()),
        "cells": [c.to_dict() for c in cells],
        "rows": rows,
        "summary": summary,
        "timing": {"seconds": elapsed},
    }
    flat = [{"row_type": "replicate", **r} for r in rows]
    for s in summary:
        flat.append({"row_type": "summary", **s})
    columns = ["row_type", "cell", "replicate", "kind", "n", "p", "p0", "sigma_sq", "prior",
               "strategy", "chosen", "tp", "fp", "tn", "fn", *METRIC_FIELDS, "n_selected",
               "replicates", *[f"{m}_{s}" for m in METRIC_FIELDS + ("n_selected",) for s in ("mean", "se")]]
    return report, flat, columns


def cmd_diagnose(args) -> tuple[dict, list[dict], list[str]]:
    hp = _hyperparams(args)
    if args.datasets < 1 or args.p < 1 or args.n < 2:
        raise ConfigError("need --datasets >= 1, --p >= 1 and --n >= 2")
    if args.workers < 0 or args.seed < 0:
        raise ConfigError("--workers and --seed must be >= 0")
    t0 = time.perf_counter()
    out = run_diagnostic(args.datasets, args.restarts, args.n, args.p, hp, args.seed, args.workers)
    elapsed = time.perf_counter() - t0
    report = {"command": "diagnose", "config": _config(args, hp), "I": args.datasets,
              "J": args.restarts, "K": args.p, "expected_mean": 1.0 / args.p, **out,
              "timing": {"seconds": elapsed}}
    rows = [{"variable": f"x{k + 1}", "s_k": float(out["s_k"][k]),
             "mean_s_ik": float(out["s_ik"][:, k].mean()),
             "mean_proportion": float(out["p_ijk"][:, :, k].mean())} for k in range(args.p)]
    return report, rows, ["variable", "mean_proportion", "mean_s_ik", "s_k"]


COMMANDS = {"select": cmd_select, "simulate": cmd_simulate, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        report, rows, columns = COMMANDS[args.command](args)
        _emit(args, report, rows, columns)
    except NoSplitsError as exc:
        print(f"bartvs: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, DataError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"bartvs: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        # Validation failures surface as ValueError from the library layer.
        print(f"bartvs: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("run failed", exc_info=True)
        print(f"bartvs: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
