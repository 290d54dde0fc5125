"""Command line front end: ``llfilter {simulate,filter,bench,convergence}``.

Every command writes CSV tables plus a JSON summary into ``--out``. On
failure a one-line JSON error record goes to stderr and the exit status is
non-zero (2 for bad configuration, 1 for numerical or IO failures).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from .adaptive import AdaptiveConfig, run_adaptive_filter
from .bench import _row_label, available_workers, format_step, run_example_experiment
from .benchmarks import EXAMPLE_IDS, get_example, load_config
from .errors import ConfigurationError, LLFilterError, ModelError
from .filter import run_exact_lmv_filter, run_ll_filter
from .simulate import DEFAULT_DELTA, simulate_observations

__all__ = ["main", "build_parser", "parse_step", "parse_grid"]

SEED_ENV = "LLFILTER_SEED"
TARGETS = {
    "filter-mean": "filter_mean",
    "filter-var": "filter_var",
    "prediction-mean": "pred_mean",
    "prediction-var": "pred_var",
}
_TOL_FLAGS = ("rtol_y", "atol_y", "rtol_P", "atol_P", "rtol", "atol", "h_min", "h_max")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def parse_step(text):
    """Positive step size from a decimal or rational literal such as ``1/64``."""
    try:
        h = Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise ConfigurationError(f"cannot parse step size {text!r}") from None
    if h <= 0:
        raise ConfigurationError(f"step size must be positive, got {text!r}")
    return float(h)


def parse_grid(text):
    if text in ("adaptive", "conventional", "exact"):
        return text
    return parse_step(text)


def _add_common(p, grid=False, tolerances=False):
    p.add_argument("--example", help=f"benchmark id, one of {', '.join(EXAMPLE_IDS)}")
    p.add_argument("--model", help="JSON config file with example id and parameter overrides")
    p.add_argument("--seed", type=int, default=0, help=f"base seed (env {SEED_ENV} overrides)")
    p.add_argument("--out", default="llfilter_out", help="output directory")
    p.add_argument("--delta", type=parse_step, default=DEFAULT_DELTA, help="path simulation step")
    p.add_argument("--scheme", choices=("euler", "ll"), default="euler", help="path simulation scheme")
    p.add_argument("--beta", type=int, choices=(1, 2), default=1)
    if grid:
        p.add_argument("--grid", default="adaptive", help="adaptive, conventional, exact or a step size h")
    if tolerances:
        p.add_argument("--rtol-y", dest="rtol_y", type=float)
        p.add_argument("--atol-y", dest="atol_y", type=float)
        p.add_argument("--rtol-p", dest="rtol_P", type=float)
        p.add_argument("--atol-p", dest="atol_P", type=float)
        p.add_argument("--rtol", type=float, help="sets --rtol-y and --rtol-p")
        p.add_argument("--atol", type=float, help="sets --atol-y, and --atol-p to atol/1000")
        p.add_argument("--h-min", dest="h_min", type=parse_step)
        p.add_argument("--h-max", dest="h_max", type=parse_step)


def _add_experiment(p, default_hs):
    p.add_argument("--n", type=int, default=200, help="number of realizations")
    p.add_argument("--hs", default=default_hs, help="comma separated step sizes, e.g. 1/16,1/32")
    p.add_argument("--L", type=int, default=20, help="number of batches")
    p.add_argument("--K", type=int, default=None, help="batch size (default n_valid // L)")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--workers", type=int, default=None, help="worker processes (default: available cores)")


def build_parser():
    parser = _Parser(prog="llfilter", description="Local linearization filters for continuous-discrete models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate observation series")
    _add_common(p)
    p.add_argument("--n", type=int, default=1, help="number of realizations")

    p = sub.add_parser("filter", help="run one filter on one observation series")
    _add_common(p, grid=True, tolerances=True)
    p.add_argument("--data", help="observation CSV (t_k,z[0],...; optional realization column)")
    p.add_argument("--realization", type=int, default=0, help="realization index to filter")
    p.add_argument("--update-at-t0", action="store_true", help="also update with the observation at t0")

    p = sub.add_parser("bench", help="Monte Carlo error tables for one example")
    _add_common(p, tolerances=True)
    _add_experiment(p, "1/16,1/32,1/64,1/128")
    p.add_argument("--no-adaptive", dest="adaptive", action="store_false", help="skip the adaptive filter")

    p = sub.add_parser("convergence", help="estimated convergence orders for one error type")
    _add_common(p)
    _add_experiment(p, "1/16,1/32,1/64,1/128")
    p.add_argument("--target", choices=sorted(TARGETS), default="filter-mean")
    return parser


def _resolve_seed(args):
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return args.seed
    try:
        return int(env)
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _resolve_example(args):
    example, params, adaptive = args.example, {}, {}
    if args.model:
        try:
            cfg = load_config(args.model)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read model file {args.model}: {exc}") from None
        if example is not None and cfg["example"] not in (None, example):
            raise ConfigurationError("--example disagrees with the model file")
        example = example or cfg["example"]
        params, adaptive = cfg["params"], cfg["adaptive"]
    if example is None:
        raise ConfigurationError("give --example or --model")
    if example not in EXAMPLE_IDS:
        raise ConfigurationError(f"unknown example id {example!r}; choose one of {', '.join(EXAMPLE_IDS)}")
    return get_example(example, params), params, adaptive


def _adaptive_config(args, base):
    data = dict(base)
    if getattr(args, "rtol", None) is not None:
        data.update(rtol_y=args.rtol, rtol_P=args.rtol)
    if getattr(args, "atol", None) is not None:
        data.update(atol_y=args.atol, atol_P=args.atol * 1e-3)
    for name in ("rtol_y", "atol_y", "rtol_P", "atol_P", "h_min", "h_max"):
        v = getattr(args, name, None)
        if v is not None:
            data[name] = v
    return AdaptiveConfig.from_dict(data)


def _tolerances_given(args):
    return [n for n in _TOL_FLAGS if getattr(args, n, None) is not None]


def _parse_hs(text):
    hs = [parse_step(s) for s in text.split(",") if s.strip()]
    if not hs:
        raise ConfigurationError("--hs is empty")
    return hs


def _write_rows(path, rows):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    Path(path).write_text(buf.getvalue())


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _read_observations(path, obs, realization):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigurationError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    if "t_k" not in header:
        raise ConfigurationError(f"{path} has no t_k column")
    zcols = [i for i, h in enumerate(header) if h.startswith("z[")]
    if "realization" in header:
        ri = header.index("realization")
        body = [r for r in body if int(r[ri]) == realization]
    if not body:
        raise ConfigurationError(f"no rows for realization {realization} in {path}")
    t = np.array([float(r[header.index("t_k")]) for r in body])
    z = np.array([[float(r[i]) for i in zcols] for r in body])
    if t.shape != obs.times.shape or not np.allclose(t, obs.times, rtol=0, atol=1e-9):
        raise ConfigurationError("observation times in the data file do not match the model")
    return z


def cmd_simulate(args, out):
    spec, params, _ = _resolve_example(args)
    if args.n < 1:
        raise ConfigurationError("--n must be at least 1")
    seed = _resolve_seed(args)
    z = simulate_observations(spec.model, spec.observation, spec.x0, args.n, seed,
                              delta=args.delta, scheme=args.scheme)
    r = z.shape[2]
    rows = [["realization", "t_k"] + [f"z[{i}]" for i in range(r)]]
    for i in range(args.n):
        for tk, zk in zip(spec.observation.times, z[i]):
            rows.append([i, repr(float(tk))] + [repr(float(v)) for v in zk])
    path = out / f"{spec.name}_observations.csv"
    _write_rows(path, rows)
    _write_json(out / f"{spec.name}_simulate.json", dict(
        command="simulate", example=spec.name, params=spec.params, seed=seed,
        n_realizations=args.n, delta=args.delta, scheme=args.scheme,
    ))
    return [path]


def cmd_filter(args, out):
    spec, params, adaptive = _resolve_example(args)
    grid = parse_grid(args.grid)
    tol = _tolerances_given(args)
    if grid != "adaptive" and tol:
        raise ConfigurationError(f"tolerance flags {tol} need --grid adaptive")
    if grid == "exact" and (not spec.has_exact_filter or params):
        raise ConfigurationError("--grid exact is available for ex1/ex2 with default parameters only")
    seed = _resolve_seed(args)
    obs = spec.observation
    if args.data:
        z = _read_observations(args.data, obs, args.realization)
    else:
        if args.realization < 0:
            raise ConfigurationError("--realization must be non-negative")
        z = simulate_observations(spec.model, obs, spec.x0, 1, seed, delta=args.delta,
                                  scheme=args.scheme, first_stream=args.realization)[0]
    t_start = time.perf_counter()
    cfg = None
    if grid == "exact":
        run = run_exact_lmv_filter(spec, z, update_at_t0=args.update_at_t0)
    elif grid == "adaptive":
        cfg = _adaptive_config(args, adaptive)
        run = run_adaptive_filter(spec.model, obs, z, spec.x0, spec.q0, cfg, args.beta, args.update_at_t0)
    else:
        run = run_ll_filter(spec.model, obs, z, spec.x0, spec.q0, grid, args.beta, args.update_at_t0)
    grid_label = grid if isinstance(grid, str) else format_step(grid).replace("/", "_")
    path = out / f"{spec.name}_filter_{grid_label}.csv"
    run.to_csv(path)
    _write_json(out / f"{spec.name}_filter_{grid_label}.json", dict(
        command="filter", example=spec.name, params=spec.params, seed=seed,
        realization=args.realization, data=args.data,
        grid=grid if isinstance(grid, str) else format_step(grid), beta=args.beta,
        adaptive_tolerances=None if cfg is None else cfg.to_dict(),
        update_at_t0=args.update_at_t0, delta=args.delta, scheme=args.scheme,
        wall_time_s=time.perf_counter() - t_start,
    ))
    return [path]


def _experiment(args, adaptive_flag):
    spec, params, adaptive = _resolve_example(args)
    cfg = _adaptive_config(args, adaptive) if adaptive_flag else AdaptiveConfig.from_dict(adaptive)
    workers = args.workers if args.workers is not None else available_workers()
    if workers < 1:
        raise ConfigurationError("--workers must be at least 1")
    if args.L < 2:
        raise ConfigurationError("--L must be at least 2")
    if args.K is not None and args.K < 1:
        raise ConfigurationError("--K must be at least 1")
    if not 0 < args.alpha < 1:
        raise ConfigurationError("--alpha must lie in (0, 1)")
    seed = _resolve_seed(args)
    return run_example_experiment(
        spec.name, n_realizations=args.n, hs=_parse_hs(args.hs), cfg=cfg, seed=seed,
        L=args.L, K=args.K, alpha=args.alpha, delta=args.delta, scheme=args.scheme,
        beta=args.beta, params=params or None, adaptive=adaptive_flag, workers=workers,
    )


def cmd_bench(args, out):
    result = _experiment(args, args.adaptive)
    result.summary["command"] = "bench"
    return result.write(out)


def cmd_convergence(args, out):
    result = _experiment(args, False)
    kind = TARGETS[args.target]
    rows = [("row_label", "h", "mean", "delta", "beta_hat")]
    fixed = [v for v in result.variants if v.startswith("h=")]
    for k, beta in enumerate(result.orders[kind]):
        label = _row_label(kind, k)
        for v in fixed:
            ci = result.estimates[kind][v][k]
            rows.append((
                label, v[2:],
                "" if ci is None else repr(ci.mean),
                "" if ci is None else repr(ci.delta),
                repr(beta) if np.isfinite(beta) else "",
            ))
    path = out / f"{result.example}_convergence_{kind}.csv"
    _write_rows(path, rows)
    finite = [b for b in result.orders[kind] if np.isfinite(b)]
    report = dict(result.summary, command="convergence", target=args.target,
                  beta_hat=[b if np.isfinite(b) else None for b in result.orders[kind]],
                  beta_hat_median=float(np.median(finite)) if finite else None)
    _write_json(out / f"{result.example}_convergence_{kind}.json", report)
    print(json.dumps({"target": args.target, "beta_hat": report["beta_hat"],
                      "beta_hat_median": report["beta_hat_median"]}))
    return [path]


COMMANDS = {
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "bench": cmd_bench,
    "convergence": cmd_convergence,
}


def _error_record(exc, command):
    rec = {"error": type(exc).__name__, "message": str(exc), "command": command}
    if getattr(exc, "time", None) is not None:
        rec["time"] = exc.time
    return json.dumps(rec)


def main(argv=None):
    """Entry point; returns the exit status."""
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for path in COMMANDS[command](args, out):
            print(path, file=sys.stderr)
        return 0
    except (ConfigurationError, ModelError) as exc:
        print(_error_record(exc, command), file=sys.stderr)
        return 2
    except (LLFilterError, ValueError, ArithmeticError, OSError) as exc:
        print(_error_record(exc, command), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
