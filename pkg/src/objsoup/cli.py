"""Command-line entry point: ``objsoup run|conflicts|compare|gradcheck``.

Exit codes: 0 success, 1 config or usage error, 2 numerical failure, 3 I/O.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .param_space import NumericalFailure
from .problems import build_problem, gradient_errors
from .recipes import ConfigError
from .seeding import stream

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _fail(code: int, message: str) -> int:
    print(f"objsoup: {message}", file=sys.stderr)
    return code


def cmd_run(args) -> int:
    try:
        cfg = harness.load_config(args.config)
        seed = harness.resolve_seed(cfg, args.seed)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, f"config error: {exc}")
    out = args.out or cfg.output["directory"]
    if out is None:
        return _fail(EXIT_CONFIG, "no output directory: pass --out or set output.directory")
    try:
        result = harness.run_experiment(cfg, out, seed)
    except harness.HarnessIOError as exc:
        return _fail(EXIT_IO, str(exc))
    if result.error is not None:
        return _fail(EXIT_NUMERICAL, f"numerical failure at iteration {result.summary['iterations']}: {result.error}")
    s = result.summary
    print(f"{s['recipe']} on {s['problem']} seed {s['seed']}: {s['iterations']} iterations, "
          f"stationarity {s['stationarity']:.3e} -> {result.directory}")
    return EXIT_OK


def cmd_conflicts(args) -> int:
    try:
        if args.run is not None:
            report = harness.conflict_report_for_run(args.run)
        else:
            cfg = harness.load_config(args.config)
            report = harness.conflict_report_for_config(cfg, args.seed)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except NumericalFailure as exc:
        return _fail(EXIT_NUMERICAL, f"numerical failure during accumulation: {exc}")
    except OSError as exc:
        return _fail(EXIT_IO, str(exc))
    try:
        Path(args.out).write_text(report.to_csv(per_layer=args.per_layer))
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write {args.out}: {exc}")
    layers = ", ".join(str(b) for b in sorted(report.conflicting_layers)) or "none"
    print(f"conflicting layers: {layers}")
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        rows = harness.compare_runs(args.runs, tol=args.tol)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except (OSError, ValueError) as exc:
        return _fail(EXIT_IO, str(exc))
    try:
        Path(args.out).write_text(harness.rows_to_csv(rows))
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write {args.out}: {exc}")
    print(f"{len(rows)} runs -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        params = json.loads(args.params) if args.params else {}
        problem = build_problem(args.problem, params)
    except (ValueError, TypeError) as exc:
        return _fail(EXIT_CONFIG, f"cannot build problem: {exc}")
    if args.h is not None and not args.h > 0:
        return _fail(EXIT_CONFIG, f"--h must be positive, got {args.h}")
    theta = problem.init_params(stream(args.seed, "gradcheck"))
    try:
        errors = gradient_errors(problem, theta, args.h, corrupt=args.corrupt)
    except NumericalFailure as exc:
        return _fail(EXIT_NUMERICAL, f"gradient check failed: {exc}")
    worst = 0.0
    for o, (err, coord) in errors.items():
        block = next(b for b in theta.layout.ids if coord in range(*theta.layout.slice(b).indices(theta.layout.size)))
        print(f"{str(o):>8}  rel_error {err:.3e}  worst coordinate {coord} ({block})")
        worst = max(worst, err)
    if not np.isfinite(worst) or worst >= GRADCHECK_TOL:
        return _fail(EXIT_NUMERICAL, f"gradient check failed: max relative error {worst:.3e} >= {GRADCHECK_TOL:g}")
    print(f"ok: max relative error {worst:.3e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="objsoup", description="Multi-objective training recipes on synthetic problems.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="train from a JSON config and write a run directory")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default=None, help="run directory (overrides output.directory)")
    r.add_argument("--seed", type=int, default=None, help=f"master seed (fallback: ${harness.SEED_ENV})")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("conflicts", help="per-layer gradient cosine tables as CSV")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--run", help="existing run directory with a saved accumulator")
    src.add_argument("--config", help="config to run for the warm-up window")
    c.add_argument("--out", required=True)
    c.add_argument("--per-layer", action="store_true")
    c.add_argument("--seed", type=int, default=None)
    c.set_defaults(func=cmd_conflicts)

    m = sub.add_parser("compare", help="one CSV row per run, with per-recipe means")
    m.add_argument("--out", required=True)
    m.add_argument("--tol", type=float, default=1e-4, help="stationarity tolerance for iterations-to-tolerance")
    m.add_argument("runs", nargs="+")
    m.set_defaults(func=cmd_compare)

    g = sub.add_parser("gradcheck", help="analytic vs central-difference gradients")
    g.add_argument("--problem", required=True)
    g.add_argument("--params", default=None, help="problem parameters as a JSON object")
    g.add_argument("--h", type=float, default=None, help="difference step (problem default if omitted)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
