"""Command-line entry point: ``dgpt <subcommand> ...``.

Schema and usage errors exit with status 2, runtime failures with 1. Both
print a one-line JSON error object on stderr. ``DGPT_WORKERS`` sets the
default worker count for ``sweep`` and ``bo``.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys

import numpy as np

from . import analysis as an
from . import diffcore as dc
from .bo import FUNCTIONS, BoConfig, bo_seeds
from .bridge import BridgeError, BridgeParams, solve_doob
from .harness import (ConfigError, ParseError, TrainConfig, TrainingDiverged, aggregate,
                      dataset_from_source, divergence_filter, evaluate, load_checkpoint,
                      read_csv, read_records, save_checkpoint, sweep, train, write_records)

WORKERS_ENV = "DGPT_WORKERS"
ALIASES = {"om-path": "om"}


class UsageFailure(Exception):
    """Bad flags or an unknown subcommand."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageFailure(message)


def _emit_error(kind, message, code):
    print(json.dumps({"error": kind, "message": str(message), "exit_code": code}), file=sys.stderr)
    return code


def _workers(flag):
    if flag is not None:
        return flag
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _int_list(text):
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise ConfigError(f"expected positive integers, got {text!r}")
    return vals


def _source(args):
    if args.data is not None:
        return {"csv": args.data, "target": args.target, "task": args.task}
    return {"synthetic": args.synthetic, "n": args.n}


def _out(path):
    return sys.stdout if path in (None, "-") else open(path, "w", newline="")


def _close(fh):
    if fh is not sys.stdout:
        fh.close()


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    config = TrainConfig.from_dict(_read_json(args.config))
    ds = dataset_from_source(_source(args), seed=config.seed)
    model, rec = train(config, ds)
    if args.out:
        save_checkpoint(args.out, model, config, ds)
    if args.records:
        write_records(args.records, [rec], append=True)
    print(rec.to_json())


def _external_split(header, path, target):
    """Whole CSV as a test set, standardised with the checkpoint's training statistics."""
    stats = header.get("stats") or {}
    target = target if target is not None else header.get("target") or -1
    X, y, _ = read_csv(path, target)
    xm, xs = np.asarray(stats.get("x_mean", 0.0)), np.asarray(stats.get("x_std", 1.0))
    ym, ys = stats.get("y_mean", 0.0), stats.get("y_std", 1.0)
    if X.shape[1] != header["d_in"]:
        raise dc.DimensionError(f"{path}: {X.shape[1]} features, model expects {header['d_in']}")
    return (X - xm) / xs, (y - ym) / ys


def _eval_data(header, config, data, target):
    if data is not None:
        return _external_split(header, data, target)
    if not header.get("source"):
        raise ConfigError("checkpoint has no data source; pass --data")
    ds = dataset_from_source(header["source"], seed=config.seed)
    return ds.X_test, ds.y_test


def cmd_eval(args):
    model, config, header = load_checkpoint(args.model)
    X, y = _eval_data(header, config, args.data, args.target)
    S = args.samples or config.mc_eval
    m = evaluate(model, None, S, np.random.default_rng(args.seed), steps=args.steps, X=X, y=y)
    print(json.dumps({"model": args.model, "config_hash": header["config_hash"], "n": len(y),
                      "samples": S, **m}, sort_keys=True))


def cmd_fewstep(args):
    model, config, header = load_checkpoint(args.model)
    X, y = _eval_data(header, config, args.data, args.target)
    S = args.samples or config.mc_eval
    rows = {}
    for st in _int_list(args.steps):
        rows[str(st)] = evaluate(model, None, S, np.random.default_rng(args.seed), steps=st, X=X, y=y)
    print(json.dumps({"model": args.model, "objective": config.objective, "dataset": header.get("source"),
                      "seed": config.seed, "train_steps": config.N, "fewstep": rows}, sort_keys=True))


def _expand_grid(grid_spec):
    if not isinstance(grid_spec, dict) or "data" not in grid_spec:
        raise ConfigError("grid file needs 'data' and optional 'base' and 'grid' objects")
    base = grid_spec.get("base", {})
    grid = grid_spec.get("grid", {})
    if not isinstance(grid, dict) or any(not isinstance(v, list) or not v for v in grid.values()):
        raise ConfigError("'grid' must map field names to non-empty lists")
    keys = sorted(grid)
    configs = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        configs.append(TrainConfig.from_dict({**base, **dict(zip(keys, combo))}))
    return configs


def cmd_sweep(args):
    grid_spec = _read_json(args.grid)
    configs = _expand_grid(grid_spec)
    sources = grid_spec["data"] if isinstance(grid_spec["data"], list) else [grid_spec["data"]]
    jobs = [(c, dataset_from_source(src, seed=c.seed)) for src in sources for c in configs]
    records = sweep(jobs, workers=_workers(args.workers))
    fh = _out(args.out)
    for r in records:
        fh.write(r.to_json() + "\n")
    _close(fh)
    cells, excluded = aggregate(records)
    # the summary goes to stderr so stdout stays pure JSONL
    print(json.dumps({"jobs": len(records), "cells": cells, "excluded_seeds": excluded},
                     sort_keys=True), file=sys.stderr)


def cmd_stats(args):
    records = read_records(args.records)
    pair = args.pair.split(":")
    if len(pair) != 2:
        raise ConfigError(f"--pair needs 'a:b', got {args.pair!r}")
    a_name, b_name = (ALIASES.get(p, p) for p in pair)
    metrics = [m for m in args.metric.split(",") if m]
    corrections = [c for c in args.correct.split(",") if c]
    for c in corrections:
        if c not in ("bh", "bonferroni"):
            raise ConfigError(f"unknown correction {c!r}")
    records = [r for r in records if r.objective in (a_name, b_name)]
    kept, excluded = divergence_filter(records)
    by = {}
    for r in kept:
        by.setdefault(r.dataset, {}).setdefault(r.objective, {})[r.seed] = r
    results = []
    for dataset in sorted(by):
        a, b = by[dataset].get(a_name, {}), by[dataset].get(b_name, {})
        seeds = sorted(set(a) & set(b))
        for metric in metrics:
            ps = an.PairedSample([a[s].metrics[metric] for s in seeds],
                                 [b[s].metrics[metric] for s in seeds], metric=metric, seeds=tuple(seeds))
            try:
                res = an.wilcoxon_one_sided(ps)
            except an.DegenerateSampleError as exc:
                res = an.TestResult(float("nan"), float("nan"), len(seeds))
                res.label = f"degenerate: {exc}"
            results.append((dataset, metric, len(excluded.get(dataset, [])), res))
    valid = [i for i, r in enumerate(results) if np.isfinite(r[3].p)]
    pvals = [results[i][3].p for i in valid]
    q = an.bh_adjust(pvals) if pvals else []
    bonf = an.bonferroni(pvals) if pvals else []
    for j, i in enumerate(valid):
        if "bh" in corrections:
            results[i][3].q_bh = float(q[j])
        if "bonferroni" in corrections:
            results[i][3].p_bonf = float(bonf[j])
    fh = _out(args.out)
    w = csv.writer(fh)
    w.writerow(["dataset", "metric", "a", "b", "n", "excluded", "statistic", "p", "q_bh", "p_bonf",
                "exact", "note"])
    for dataset, metric, n_ex, r in results:
        w.writerow([dataset, metric, a_name, b_name, r.n, n_ex, f"{r.statistic:g}", an.format_p(r.p),
                    an.format_p(r.q_bh), an.format_p(r.p_bonf), int(r.exact), r.label])
    _close(fh)


def cmd_bo(args):
    if args.full_budget:
        cfg = BoConfig.full_budget(function=args.function, surrogate=args.surrogate, dim=args.dim)
    else:
        cfg = BoConfig(function=args.function, surrogate=args.surrogate, dim=args.dim,
                       n_iters=args.iters if args.iters is not None else 30)
    traces = bo_seeds(cfg, range(args.seeds), workers=_workers(args.workers))
    fh = _out(args.out)
    for t in traces:
        fh.write(t.to_json() + "\n")
    _close(fh)
    if args.csv:
        an.emit_plotdata([{"method": t.surrogate, "dataset": t.function, "seed": t.seed,
                           "regret": [] if t.discarded else t.regret} for t in traces],
                         "regret", args.csv)
    kept = [t for t in traces if not t.discarded]
    summary = {"function": cfg.function, "surrogate": cfg.surrogate, "seeds": args.seeds,
               "discarded": [{"seed": t.seed, "reason": t.reason} for t in traces if t.discarded],
               "mean_final_regret": float(np.mean([t.regret[-1] for t in kept])) if kept else None}
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)


def cmd_bridge_coeffs(args):
    try:
        params = BridgeParams(lam=args.lam, g=args.g, sigma0=args.sigma0, grid_n=args.grid)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    sched = solve_doob(params)
    fh = _out(args.out)
    w = csv.writer(fh)
    w.writerow(["s", "phi", "kappa", "phi_dot", "kappa_dot"])
    for row in sched.to_rows():
        w.writerow([f"{v:.10g}" for v in row])
    _close(fh)


def cmd_repro(args):
    from .acceptance import SUITE, run_suite

    if args.suite != "acceptance":
        raise ConfigError(f"unknown suite {args.suite!r}")
    numbers = _int_list(args.only) if args.only else None
    if numbers and not set(numbers) <= set(SUITE):
        raise ConfigError(f"criteria must be in 1..{len(SUITE)}")
    results = run_suite(numbers, echo=print)
    n_pass = sum(r.passed for r in results)
    print(f"{n_pass}/{len(results)} criteria passed")
    return 0 if n_pass == len(results) else 1


# ---------------------------------------------------------------------------


def _data_flags(p, required=False):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--data", help="numeric CSV with a header row")
    g.add_argument("--synthetic", choices=("toy1d", "het1d"), help="generated dataset")
    p.add_argument("--target", default=None, help="target column name or index (default: last)")
    p.add_argument("--task", choices=("regression", "classification"), default="regression")
    p.add_argument("--n", type=int, default=500, help="size of a generated dataset")


def build_parser():
    parser = _Parser(prog="dgpt", description="Deep GP posterior transport toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train one model from a JSON config")
    p.add_argument("--config", required=True)
    _data_flags(p, required=True)
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--records", help="append the run record to this JSONL file")
    p.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "test metrics of a checkpoint"),
                               ("fewstep", cmd_fewstep, "metrics at several Euler step counts")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True)
        p.add_argument("--data", help="CSV to score; defaults to the checkpoint's own test split")
        p.add_argument("--target", default=None)
        p.add_argument("--samples", type=int, default=None)
        p.add_argument("--seed", type=int, default=0)
        if name == "eval":
            p.add_argument("--steps", type=int, default=None)
        else:
            p.add_argument("--steps", default="1,2,4,10,20")
        p.set_defaults(fn=fn)

    p = sub.add_parser("sweep", help="run a grid of configs")
    p.add_argument("--grid", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", help="records JSONL (default stdout)")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("stats", help="paired Wilcoxon tests with corrections")
    p.add_argument("--records", required=True)
    p.add_argument("--pair", required=True, help="method_a:method_b, testing a < b")
    p.add_argument("--metric", default="rmse,nll")
    p.add_argument("--correct", default="bh,bonferroni")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("bo", help="Thompson-sampling BO on a synthetic function")
    p.add_argument("--function", choices=sorted(FUNCTIONS), default="hartmann6")
    p.add_argument("--surrogate", default="om-path")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--full-budget", action="store_true")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", help="trace JSONL (default stdout)")
    p.add_argument("--csv", help="regret-curve CSV")
    p.set_defaults(fn=cmd_bo)

    p = sub.add_parser("bridge-coeffs", help="bridge schedule as CSV")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--g", type=float, default=1.0)
    p.add_argument("--sigma0", type=float, default=1.0)
    p.add_argument("--grid", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bridge_coeffs)

    p = sub.add_parser("repro", help="run the acceptance suite")
    p.add_argument("--suite", default="acceptance")
    p.add_argument("--only", help="comma-separated criterion numbers")
    p.set_defaults(fn=cmd_repro)
    return parser


SCHEMA_ERRORS = (UsageFailure, ConfigError, ParseError, dc.DimensionError)
RUNTIME_ERRORS = (TrainingDiverged, dc.DecompositionError, dc.NonFiniteError, BridgeError,
                  OSError, ValueError, ArithmeticError)


def dispatch(argv=None):
    """Parse ``argv``, run the subcommand and return the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "workers", None) is not None and args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if getattr(args, "seeds", None) is not None and args.seeds < 1:
            raise ConfigError("--seeds must be >= 1")
        if args.command == "bo":
            args.surrogate = ALIASES.get(args.surrogate, args.surrogate)
            try:
                BoConfig(function=args.function, surrogate=args.surrogate, dim=args.dim)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        code = args.fn(args)
    except SCHEMA_ERRORS as exc:
        return _emit_error(type(exc).__name__, exc, 2)
    except RUNTIME_ERRORS as exc:
        return _emit_error(type(exc).__name__, exc, 1)
    return 0 if code is None else code


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
