"""Experiment configuration, runs on disk, summaries and reports.

A run directory holds:

* ``trace.jsonl``: one record per logged iteration, then a terminal record
  (``final`` or ``error``) carrying the params hash, wallclock and the problem
  fingerprint.
* ``summary.json``: ``summarize_trace`` of the trace, nothing else.
* ``config.resolved.json``: the input config with every default filled in.
  Feeding it back reproduces the trace.
* ``conflict_accumulator.npz``: window-averaged per-objective gradients for
  offline conflict analysis (format ``npz``).
"""
from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .conflict import ConflictReport, GradientAccumulator, detect_conflicting_layers
from .param_space import NumericalFailure
from .problems import Problem, build_problem
from .recipes import Budget, ConfigError, RecipeConfig, RunTrace, TrainingAborted, train

SEED_ENV = "OBJSOUP_SEED"
TRACE_FILE = "trace.jsonl"
SUMMARY_FILE = "summary.json"
RESOLVED_FILE = "config.resolved.json"
ACCUMULATOR_FILE = "conflict_accumulator.npz"
FORMATS = ("jsonl", "json", "npz", "csv")

RECIPE_DEFAULTS = {
    "kind": None,
    "levels": None,
    "order_label": "",
    "penalties": None,
    "nested": False,
    "gamma_schedule": "constant",
    "static_weights": None,
    "epsilon_track": 0.1,
    "pretrain_epochs": 0,
    "conflict_mode": "literal",
    "conflict_tau": 0.0,
}
OPTIMIZER_DEFAULTS = {
    "alpha": 5e-5,
    "beta": 5e-4,
    "gamma": 0.01,
    "batch_size": 64,
    "iters_per_epoch": 50,
    "epochs": 20,
    "log_every": 10,
    "efficient_mode": False,
    "warmup_epochs": 20,
}
OUTPUT_DEFAULTS = {"directory": None, "formats": ["jsonl", "json", "npz"]}
PROBLEM_KEYS = {"name", "params", "seed"}


class HarnessIOError(OSError):
    pass


@dataclass
class ExperimentConfig:
    problem_name: str
    problem_params: dict
    seed: int | None
    recipe: RecipeConfig
    budget: Budget
    output: dict = field(default_factory=lambda: dict(OUTPUT_DEFAULTS))
    problem: Problem | None = None

    def resolved_dict(self, seed: int) -> dict:
        r = self.recipe.to_dict()
        recipe = {k: r[k] for k in RECIPE_DEFAULTS}
        optimizer = {
            "alpha": r["alpha"], "beta": r["beta"], "gamma": r["gamma"],
            "batch_size": self.budget.batch_size,
            "iters_per_epoch": self.budget.iters_per_epoch,
            "epochs": self.budget.epochs,
            "log_every": self.budget.log_every,
            "efficient_mode": r["efficient_mode"],
            "warmup_epochs": r["warmup_epochs"],
        }
        return {
            "problem": {"name": self.problem_name, "params": copy.deepcopy(self.problem.spec.params), "seed": seed},
            "recipe": recipe,
            "optimizer": optimizer,
            "output": copy.deepcopy(self.output),
        }


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be an object")
    extra = set(given) - set(allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in {section!r}: {sorted(extra)}")


def _number(name: str, v, *, positive=False, integer=False, nonneg=False, optional=False):
    if v is None and optional:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name} must be a number, got {v!r}")
    if integer and not float(v).is_integer():
        raise ConfigError(f"{name} must be an integer, got {v!r}")
    if not math.isfinite(v):
        raise ConfigError(f"{name} must be finite")
    if positive and v <= 0:
        raise ConfigError(f"{name} must be positive, got {v!r}")
    if nonneg and v < 0:
        raise ConfigError(f"{name} must be nonnegative, got {v!r}")
    return int(v) if integer else float(v)


def _flag(name: str, v) -> bool:
    if not isinstance(v, bool):
        raise ConfigError(f"{name} must be true or false, got {v!r}")
    return v


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate a config document and build the problem. Raises ConfigError."""
    _check_keys("config", doc, {"problem", "recipe", "optimizer", "output"})
    for sec in ("problem", "recipe"):
        if sec not in doc:
            raise ConfigError(f"missing section {sec!r}")
    prob = doc["problem"]
    _check_keys("problem", prob, PROBLEM_KEYS)
    if "name" not in prob or not isinstance(prob["name"], str):
        raise ConfigError("problem.name must be a string")
    params = prob.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigError("problem.params must be an object")
    seed = _number("problem.seed", prob.get("seed"), integer=True, nonneg=True, optional=True)

    rec = doc["recipe"]
    _check_keys("recipe", rec, RECIPE_DEFAULTS)
    rec = {**RECIPE_DEFAULTS, **rec}
    if not isinstance(rec["kind"], str):
        raise ConfigError("recipe.kind must be a string")
    opt = doc.get("optimizer", {})
    _check_keys("optimizer", opt, OPTIMIZER_DEFAULTS)
    opt = {**OPTIMIZER_DEFAULTS, **opt}
    out = doc.get("output", {})
    _check_keys("output", out, OUTPUT_DEFAULTS)
    out = {**OUTPUT_DEFAULTS, **out}
    if out["directory"] is not None and not isinstance(out["directory"], str):
        raise ConfigError("output.directory must be a string")
    if not isinstance(out["formats"], list) or set(out["formats"]) - set(FORMATS):
        raise ConfigError(f"output.formats must be a list drawn from {FORMATS}")
    out["formats"] = [f for f in FORMATS if f in out["formats"]]

    alpha = _number("optimizer.alpha", opt["alpha"], positive=True)
    beta = _number("optimizer.beta", opt["beta"], positive=True)
    gamma = _number("optimizer.gamma", opt["gamma"], positive=True)
    try:
        budget = Budget(
            epochs=_number("optimizer.epochs", opt["epochs"], integer=True, nonneg=True),
            iters_per_epoch=_number("optimizer.iters_per_epoch", opt["iters_per_epoch"], integer=True, positive=True),
            batch_size=_number("optimizer.batch_size", opt["batch_size"], integer=True, positive=True, optional=True),
            log_every=_number("optimizer.log_every", opt["log_every"], integer=True, positive=True),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    for key in ("nested",):
        _flag(f"recipe.{key}", rec[key])
    penalties = rec["penalties"]
    if penalties is not None:
        if not isinstance(penalties, dict):
            raise ConfigError("recipe.penalties must be an object")
        for k, v in penalties.items():
            _check_keys(f"recipe.penalties.{k}", v, {"init", "rate_per_epoch", "cap"})
            for f in v:
                _number(f"recipe.penalties.{k}.{f}", v[f])
    try:
        recipe = RecipeConfig(
            kind=rec["kind"],
            levels=rec["levels"],
            order_label=str(rec["order_label"]),
            penalties=penalties,
            nested=rec["nested"],
            alpha=alpha,
            beta=beta,
            gamma=gamma,
            gamma_schedule=rec["gamma_schedule"],
            static_weights=rec["static_weights"],
            epsilon_track=_number("recipe.epsilon_track", rec["epsilon_track"], nonneg=True),
            pretrain_epochs=_number("recipe.pretrain_epochs", rec["pretrain_epochs"], integer=True, nonneg=True),
            efficient_mode=_flag("optimizer.efficient_mode", opt["efficient_mode"]),
            warmup_epochs=_number("optimizer.warmup_epochs", opt["warmup_epochs"], integer=True, positive=True),
            conflict_mode=rec["conflict_mode"],
            conflict_tau=_number("recipe.conflict_tau", rec["conflict_tau"]),
        )
        problem = build_problem(prob["name"], params)
        recipe = recipe.resolved(problem)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(prob["name"], params, seed, recipe, budget, out, problem)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(doc)


def resolve_seed(cfg: ExperimentConfig, override: int | None = None) -> int:
    """Command-line seed, then the config's seed, then $OBJSOUP_SEED, then 0."""
    if override is not None:
        return int(override)
    if cfg.seed is not None:
        return cfg.seed
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return 0


# -- summaries -----------------------------------------------------------------

def _split_trace(records: list[dict]) -> tuple[list[dict], dict | None]:
    data = [r for r in records if "iter" in r and "error" not in r and not r.get("final")]
    terminal = next((r for r in reversed(records) if r.get("final") or "error" in r), None)
    return data, terminal


def iterations_to_tolerance(records: list[dict], tol: float) -> int | None:
    """First logged iteration whose stationarity is at most ``tol``."""
    for r in _split_trace(records)[0]:
        if r["stationarity"] is not None and r["stationarity"] <= tol:
            return r["iter"]
    return None


def summarize_trace(records: list[dict], tol: float = 1e-4) -> dict:
    """Run summary computed from the trace records alone."""
    data, terminal = _split_trace(records)
    terminal = terminal or {}
    failed = "error" in terminal
    if not data:
        if not failed:
            raise ValueError("trace has no iteration records")
        data = [{"recipe": None, "order": None, "epoch": terminal["epoch"], "losses": {}, "stationarity": None,
                 "feasibility_gap": None, "eta": {}, "lambda": {}, "lambda_u": None, "conflict_layers": []}]
    last = data[-1]
    return {
        "problem": terminal.get("problem"),
        "fingerprint": terminal.get("fingerprint"),
        "seed": terminal.get("seed"),
        "recipe": last["recipe"],
        "order": last["order"],
        "status": "numerical_failure" if failed else "ok",
        "error": terminal.get("message") if failed else None,
        "iterations": terminal["iter"] if failed else last["iter"],
        "epochs": last["epoch"],
        "final_losses": last["losses"],
        "stationarity": last["stationarity"],
        "pareto_distance": last.get("pareto_distance"),
        "feasibility_gap": last["feasibility_gap"],
        "penalties": last["eta"],
        "lambda": last["lambda"],
        "lambda_u": last["lambda_u"],
        "conflict_layers": last["conflict_layers"],
        "tolerance": tol,
        "iterations_to_tolerance": iterations_to_tolerance(records, tol),
        "wallclock_ms": terminal.get("wallclock_ms"),
        "params_hash": terminal.get("params_hash"),
    }


def read_trace(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def dumps_trace(records: list[dict]) -> str:
    return "".join(json.dumps(r) + "\n" for r in records)


# -- runs ------------------------------------------------------------------------

@dataclass
class RunResult:
    directory: Path
    records: list[dict]
    summary: dict
    trace: RunTrace
    error: str | None = None


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise HarnessIOError(f"cannot write {path}: {exc}") from exc


def execute(cfg: ExperimentConfig, seed: int) -> tuple[RunTrace, str | None]:
    """Train; on numerical failure return the partial trace and the message."""
    try:
        return train(cfg.problem, cfg.recipe, cfg.budget, seed=seed), None
    except TrainingAborted as exc:
        return exc.trace, str(exc)


def run_experiment(cfg: ExperimentConfig, out_dir, seed: int | None = None) -> RunResult:
    """Run ``cfg`` and write the run directory. Numerical failures still write
    the partial trace and a failed summary; the caller decides the exit code."""
    seed = resolve_seed(cfg, seed)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise HarnessIOError(f"cannot create {out}: {exc}") from exc
    resolved = cfg.resolved_dict(seed)
    trace, error = execute(cfg, seed)
    records = list(trace.records)
    records[-1] = {**records[-1], "problem": cfg.problem_name, "fingerprint": cfg.problem.spec.fingerprint,
                   "seed": seed, "objectives": [str(o) for o in cfg.problem.objectives]}
    summary = summarize_trace(records)
    _write(out / RESOLVED_FILE, json.dumps(resolved, indent=2) + "\n")
    _write(out / TRACE_FILE, dumps_trace(records))
    _write(out / SUMMARY_FILE, json.dumps(summary, indent=2) + "\n")
    formats = cfg.output["formats"]
    if "npz" in formats and trace.accumulator is not None and trace.accumulator.count > 0:
        try:
            trace.accumulator.to_npz(out / ACCUMULATOR_FILE)
        except OSError as exc:
            raise HarnessIOError(f"cannot write {out / ACCUMULATOR_FILE}: {exc}") from exc
    if "csv" in formats:
        _write(out / "losses.csv", trace_csv(records))
    if trace.conflict_report is not None:
        _write(out / "conflict_report.json", trace.conflict_report.to_json() + "\n")
    return RunResult(out, records, summary, trace, error)


def trace_csv(records: list[dict]) -> str:
    """Plot-ready table: one row per logged iteration."""
    data, _ = _split_trace(records)
    names = sorted({k for r in data for k in r["losses"]})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "epoch", *[f"loss_{n}" for n in names], "stationarity", "feasibility_gap", "pareto_distance"])
    for r in data:
        w.writerow([r["iter"], r["epoch"], *[repr(r["losses"].get(n)) for n in names],
                    repr(r["stationarity"]), repr(r["feasibility_gap"]), repr(r.get("pareto_distance"))])
    return buf.getvalue()


# -- conflicts -------------------------------------------------------------------

def conflict_report_for_run(run_dir) -> ConflictReport:
    """Re-detect conflicting layers from a run's saved accumulator."""
    run_dir = Path(run_dir)
    path = run_dir / ACCUMULATOR_FILE
    if not path.exists():
        raise ConfigError(f"{run_dir} has no {ACCUMULATOR_FILE}; rerun with output format 'npz'")
    try:
        acc = GradientAccumulator.from_npz(path)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"unreadable accumulator {path}: {exc}") from None
    mode, tau = "literal", 0.0
    resolved = run_dir / RESOLVED_FILE
    if resolved.exists():
        rec = json.loads(resolved.read_text()).get("recipe", {})
        mode, tau = rec.get("conflict_mode", mode), rec.get("conflict_tau", tau)
    return _detect(acc, mode, tau)


def conflict_report_for_config(cfg: ExperimentConfig, seed: int | None = None) -> ConflictReport:
    """Fresh run over the warm-up window only, then detection."""
    seed = resolve_seed(cfg, seed)
    budget = Budget(cfg.recipe.warmup_epochs, cfg.budget.iters_per_epoch, cfg.budget.batch_size,
                    cfg.budget.log_every)
    trace = train(cfg.problem, cfg.recipe, budget, seed=seed)
    return _detect(trace.accumulator, cfg.recipe.conflict_mode, cfg.recipe.conflict_tau)


def _detect(acc: GradientAccumulator, mode: str, tau: float) -> ConflictReport:
    if acc.count == 0:
        raise ConfigError("accumulator holds no gradients")
    try:
        return detect_conflicting_layers(acc, mode=mode, tau=tau)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# -- comparison ------------------------------------------------------------------

def compare_runs(run_dirs, tol: float = 1e-4) -> list[dict]:
    """One row per run plus per-recipe mean columns. Runs must share a problem."""
    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two runs")
    summaries = []
    for d in run_dirs:
        path = Path(d) / TRACE_FILE
        try:
            records = read_trace(path)
        except OSError as exc:
            raise HarnessIOError(f"cannot read {path}: {exc}") from exc
        s = summarize_trace(records, tol)
        summaries.append((str(d), s))
    prints = {s["fingerprint"] for _, s in summaries}
    if len(prints) != 1:
        raise ConfigError(f"runs are over different problems (fingerprints {sorted(map(str, prints))})")

    objectives = sorted({k for _, s in summaries for k in s["final_losses"]})
    metrics = [f"loss_{o}" for o in objectives] + ["stationarity", "pareto_distance", "feasibility_gap",
                                                   "iterations_to_tolerance"]
    rows = []
    for d, s in summaries:
        row = {"run": d, "recipe": s["recipe"], "order": s["order"], "seed": s["seed"], "status": s["status"]}
        for o in objectives:
            row[f"loss_{o}"] = s["final_losses"].get(o)
        for k in ("stationarity", "pareto_distance", "feasibility_gap", "iterations_to_tolerance"):
            row[k] = s[k]
        rows.append(row)
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault((row["recipe"], row["order"]), []).append(row)
    for row in rows:
        group = groups[(row["recipe"], row["order"])]
        for m in metrics:
            vals = [g[m] for g in group if g[m] is not None]
            row[f"mean_{m}"] = sum(vals) / len(vals) if len(vals) == len(group) else None
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


__all__ = [
    "ExperimentConfig",
    "HarnessIOError",
    "NumericalFailure",
    "RunResult",
    "compare_runs",
    "conflict_report_for_config",
    "conflict_report_for_run",
    "dumps_trace",
    "iterations_to_tolerance",
    "load_config",
    "parse_config",
    "read_trace",
    "resolve_seed",
    "rows_to_csv",
    "run_experiment",
    "summarize_trace",
    "trace_csv",
]
