"""Objective-soup recipes, baselines and the training loop.

Backbone updates (``a`` = backbone rate, ``lam_p`` = weights of level p):

* VS: ``theta -= a * G lam`` with every objective (unsupervised included)
  sharing one simplex.
* VC: ``theta -= a * (G_sup lam + eta * grad l_u)``.
* VM: ``theta -= a * (G_1 lam_1 + eta_2 G_2 lam_2 + ... + eta * grad l_u)``;
  with ``nested=True`` level p is scaled by ``eta_2 * ... * eta_p`` and the
  unsupervised term by the product of all penalties.

Heads always take a plain step on their own objective. Each level's weights
take one double-sampled ``modo_step`` per iteration; the backbone step uses
the weights from before that update.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .conflict import ConflictReport, GradientAccumulator, detect_conflicting_layers
from .param_space import (
    UNSUP,
    GradientMatrix,
    NumericalFailure,
    ObjectiveId,
    ParamVector,
    Supervised,
    axpy,
    combine,
    embed,
    parse_objective,
)
from .problems import Problem, pareto_distance, sample_batches
from .problems.base import ObjectiveEval
from .seeding import stream
from .simplex import SimplexWeights, uniform
from .weighting import WeightState, modo_step, stationarity_measure

KINDS = ("VS", "VC", "VM", "TwoStage", "StaticWeight", "Joint")
DIVERGENCE_LIMIT = 1e12


class ConfigError(ValueError):
    pass


class TrainingAborted(NumericalFailure):
    """Numerical failure mid-run; ``trace`` holds everything logged so far."""

    def __init__(self, message: str, trace: "RunTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class PenaltySchedule:
    init: float = 0.0
    rate_per_epoch: float = 0.02
    cap: float = 1.5

    def __post_init__(self):
        if self.rate_per_epoch < 0:
            raise ConfigError("penalty rate must be nonnegative")
        if self.cap < self.init:
            raise ConfigError("penalty cap must be at least the initial value")

    def value(self, epoch: int) -> float:
        return penalty_value(self, epoch)


def penalty_value(s: PenaltySchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return min(s.init + s.rate_per_epoch * epoch, s.cap)


def default_penalties(kind: str, n_levels: int = 1) -> dict[str, PenaltySchedule]:
    if kind in ("VC", "Joint"):
        return {"unsup": PenaltySchedule(0.0, 0.02, 1.5)}
    if kind == "VM":
        out = {f"level_{p}": PenaltySchedule(0.1, 0.02, 1.5) for p in range(2, n_levels + 1)}
        out["unsup"] = PenaltySchedule(0.0, 0.02, 1.5)
        return out
    return {}


@dataclass
class RecipeConfig:
    kind: str
    levels: list[list[ObjectiveId]] | None = None
    order_label: str = ""
    penalties: dict[str, PenaltySchedule] | None = None
    nested: bool = False
    alpha: float = 5e-5
    beta: float = 5e-4
    gamma: float = 0.01
    gamma_schedule: str = "constant"
    static_weights: Sequence[float] | None = None
    epsilon_track: float = 0.1
    pretrain_epochs: int = 0
    efficient_mode: bool = False
    warmup_epochs: int = 20
    conflict_mode: str = "literal"
    conflict_tau: float = 0.0

    def resolved(self, problem: Problem) -> "RecipeConfig":
        """Validated copy with defaults filled in for ``problem``."""
        if self.kind not in KINDS:
            raise ConfigError(f"unknown recipe kind {self.kind!r}; choose from {KINDS}")
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {v!r}")
        if self.gamma_schedule not in ("constant", "inv_sqrt"):
            raise ConfigError(f"unknown gamma schedule {self.gamma_schedule!r}")
        if self.conflict_mode not in ("literal", "threshold"):
            raise ConfigError(f"unknown conflict mode {self.conflict_mode!r}")
        if self.warmup_epochs < 1 or self.pretrain_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 1 and pretrain_epochs >= 0")
        sup = list(problem.supervised)
        has_u = problem.spec.has_unsupervised

        levels = self.levels
        if levels is None:
            if self.kind == "VS":
                levels = [list(problem.objectives)]
            elif self.kind == "VM":
                tasks = sorted({o.task for o in sup})
                levels = [[o for o in sup if o.task == n] for n in tasks] if len(tasks) > 1 else \
                    [[o for o in sup if o.language == t] for t in sorted({o.language for o in sup})]
            else:
                levels = [sup]
        levels = [[parse_objective(o) if isinstance(o, str) else o for o in lvl] for lvl in levels]
        if any(not lvl for lvl in levels):
            raise ConfigError("levels must be non-empty")
        flat = [o for lvl in levels for o in lvl]
        if len(set(flat)) != len(flat):
            raise ConfigError("an objective appears in more than one level")
        unknown = set(flat) - set(problem.objectives)
        if unknown:
            raise ConfigError(f"levels reference unknown objectives {sorted(map(str, unknown))}")
        if sorted(o for o in flat if isinstance(o, Supervised)) != sorted(sup):
            raise ConfigError("every supervised objective must appear in exactly one level")
        if UNSUP in flat:
            if self.kind != "VS":
                raise ConfigError("the unsupervised objective enters VC/VM/baselines through its penalty, not a level")
            if UNSUP not in levels[-1]:
                raise ConfigError("the unsupervised objective must sit in the lowest level")
        if self.kind in ("VS", "VC") and len(levels) != 1:
            raise ConfigError(f"{self.kind} uses a single level")
        if self.kind in ("TwoStage", "StaticWeight", "Joint") and len(levels) != 1:
            raise ConfigError(f"{self.kind} does not use levels")

        penalties = dict(default_penalties(self.kind, len(levels)))
        if self.penalties:
            penalties.update({k: v if isinstance(v, PenaltySchedule) else PenaltySchedule(**v)
                              for k, v in self.penalties.items()})
        allowed = {f"level_{p}" for p in range(2, len(levels) + 1)} | {"unsup"}
        extra = set(penalties) - allowed
        if extra:
            raise ConfigError(f"penalty keys {sorted(extra)} do not match the level structure")
        if self.kind == "VM":
            for p in range(2, len(levels) + 1):
                penalties.setdefault(f"level_{p}", PenaltySchedule(0.1, 0.02, 1.5))

        mu = None
        if self.kind == "StaticWeight":
            if self.static_weights is None:
                raise ConfigError("StaticWeight needs static_weights")
            mu = tuple(float(x) for x in self.static_weights)
            if len(mu) != len(sup):
                raise ConfigError(f"static_weights has {len(mu)} entries for {len(sup)} supervised objectives")
            if any(x < 0 for x in mu) or abs(sum(mu) - 1.0) > 1e-9:
                raise ConfigError("static_weights must be nonnegative and sum to 1")
        if self.kind in ("TwoStage", "StaticWeight") and self.pretrain_epochs > 0 and not has_u:
            raise ConfigError("pre-training needs an unsupervised objective")
        return replace(self, levels=levels, penalties=penalties, static_weights=mu)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "levels": None if self.levels is None else [[str(o) for o in lvl] for lvl in self.levels],
            "order_label": self.order_label,
            "penalties": None if self.penalties is None else {
                k: {"init": v.init, "rate_per_epoch": v.rate_per_epoch, "cap": v.cap} for k, v in sorted(self.penalties.items())},
            "nested": self.nested,
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "gamma_schedule": self.gamma_schedule,
            "static_weights": None if self.static_weights is None else list(self.static_weights),
            "epsilon_track": self.epsilon_track,
            "pretrain_epochs": self.pretrain_epochs,
            "efficient_mode": self.efficient_mode,
            "warmup_epochs": self.warmup_epochs,
            "conflict_mode": self.conflict_mode,
            "conflict_tau": self.conflict_tau,
        }


@dataclass
class OptimizerState:
    params: ParamVector
    weights: list[WeightState]
    epoch: int = 0
    iteration: int = 0
    penalty_values: dict[str, float] = field(default_factory=dict)
    phase: str | None = None


@dataclass(frozen=True)
class Budget:
    epochs: int
    iters_per_epoch: int
    batch_size: int | None = None
    log_every: int = 10

    def __post_init__(self):
        if self.epochs < 0 or self.iters_per_epoch < 1 or self.log_every < 1:
            raise ConfigError("budget needs epochs >= 0, iters_per_epoch >= 1, log_every >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive")


@dataclass
class RunTrace:
    records: list[dict]
    state: OptimizerState | None = None
    accumulator: GradientAccumulator | None = None
    conflict_report: ConflictReport | None = None

    def to_jsonl(self) -> str:
        import json

        return "".join(json.dumps(r, sort_keys=False) + "\n" for r in self.records)


# -- single steps ------------------------------------------------------------

def init_state(problem: Problem, config: RecipeConfig, params: ParamVector) -> OptimizerState:
    weights = [WeightState(uniform(len(lvl)), config.gamma, config.gamma_schedule) for lvl in config.levels]
    return OptimizerState(params=params, weights=weights)


def level_coefficients(config: RecipeConfig, penalties: dict[str, float]) -> tuple[list[float], float]:
    """Scale applied to each level's weighted gradient and to grad l_u."""
    P = len(config.levels)
    if config.kind == "VS":
        return [1.0], 0.0
    if config.kind == "VC":
        return [1.0], penalties.get("unsup", 0.0)
    coefs, running = [1.0], 1.0
    for p in range(2, P + 1):
        eta_p = penalties[f"level_{p}"]
        running = running * eta_p if config.nested else eta_p
        coefs.append(running)
    unsup = penalties.get("unsup", 0.0)
    if config.nested:
        unsup = running * unsup
    return coefs, unsup


def head_step(params: ParamVector, evals: ObjectiveEval, beta: float, objectives: Sequence[Supervised]) -> ParamVector:
    """``phi_o -= beta * grad_phi l_o`` for each supervised objective ``o``."""
    out = params.data.copy()
    for o in objectives:
        try:
            g = evals.heads[o]
        except KeyError:
            raise ValueError(f"missing head gradient for {o}") from None
        sl = params.layout.slice(o.head)
        out[sl] -= beta * g.data
    if not np.all(np.isfinite(out)):
        raise NumericalFailure("non-finite head parameters")
    return ParamVector(params.layout, out)


def _backbone_step(state: OptimizerState, problem: Problem, scale: float, direction: ParamVector) -> ParamVector:
    return axpy(state.params, -scale, embed(direction, problem.layout), problem.backbone_layout.ids)


def msp_step(state: OptimizerState, problem: Problem, config: RecipeConfig,
             eval1: ObjectiveEval, eval2: ObjectiveEval) -> OptimizerState:
    """One VS / VC / VM iteration from two independently sampled evaluations."""
    coefs, unsup_coef = level_coefficients(config, state.penalty_values)
    direction = np.zeros(problem.backbone_layout.size)
    new_weights = []
    for lvl, ws, coef in zip(config.levels, state.weights, coefs):
        G1 = eval1.backbone.select(lvl)
        G2 = eval2.backbone.select(lvl)
        direction += coef * combine(G1, ws.lam).data
        new_weights.append(modo_step(ws, G1, G2))
    if config.kind != "VS" and problem.spec.has_unsupervised:
        direction += unsup_coef * eval1.backbone.column(UNSUP).data
    params = _backbone_step(state, problem, config.alpha, ParamVector(problem.backbone_layout, direction))
    params = head_step(params, eval1, config.beta, problem.supervised)
    return replace(state, params=params, weights=new_weights, iteration=state.iteration + 1)


def vs_msp_step(state, problem, config, eval1, eval2):
    if config.kind != "VS":
        raise ConfigError("vs_msp_step needs a VS config")
    return msp_step(state, problem, config, eval1, eval2)


def vc_msp_step(state, problem, config, eval1, eval2):
    if config.kind != "VC":
        raise ConfigError("vc_msp_step needs a VC config")
    return msp_step(state, problem, config, eval1, eval2)


def vm_msp_step(state, problem, config, eval1, eval2):
    if config.kind != "VM":
        raise ConfigError("vm_msp_step needs a VM config")
    return msp_step(state, problem, config, eval1, eval2)


def static_weight_step(state: OptimizerState, problem: Problem, config: RecipeConfig, evals: ObjectiveEval,
                       weights: Sequence[float] | None = None) -> OptimizerState:
    """``theta -= beta * sum mu_m grad l_m`` over supervised objectives, then heads."""
    mu = np.asarray(config.static_weights if weights is None else weights, dtype=float)
    if mu.size != len(problem.supervised):
        raise ConfigError(f"{mu.size} static weights for {len(problem.supervised)} objectives")
    G = evals.backbone.select(problem.supervised)
    params = _backbone_step(state, problem, config.beta, combine(G, mu))
    params = head_step(params, evals, config.beta, problem.supervised)
    return replace(state, params=params, iteration=state.iteration + 1)


def finetune_step(state, problem, config, evals):
    """Uniform averaging over supervised objectives, rate ``beta``."""
    m = len(problem.supervised)
    return static_weight_step(state, problem, config, evals, np.full(m, 1.0 / m))


def pretrain_step(state: OptimizerState, problem: Problem, config: RecipeConfig, evals: ObjectiveEval) -> OptimizerState:
    params = _backbone_step(state, problem, config.alpha, evals.backbone.column(UNSUP))
    return replace(state, params=params, iteration=state.iteration + 1)


def joint_step(state: OptimizerState, problem: Problem, config: RecipeConfig, evals: ObjectiveEval) -> OptimizerState:
    """VC without dynamic weighting: uniform supervised average plus penalty."""
    m = len(problem.supervised)
    G = evals.backbone.select(problem.supervised)
    d = combine(G, np.full(m, 1.0 / m)).data
    if problem.spec.has_unsupervised:
        d = d + state.penalty_values.get("unsup", 0.0) * evals.backbone.column(UNSUP).data
    params = _backbone_step(state, problem, config.alpha, ParamVector(problem.backbone_layout, d))
    params = head_step(params, evals, config.beta, problem.supervised)
    return replace(state, params=params, iteration=state.iteration + 1)


# -- training loop -------------------------------------------------------------

def _lambda_objectives(config: RecipeConfig) -> list[ObjectiveId]:
    return [o for lvl in config.levels for o in lvl]


def _stationarity(problem: Problem, config: RecipeConfig, ev: ObjectiveEval, unsup_coef: float) -> float:
    if config.kind == "VS":
        return stationarity_measure(ev.backbone.select(config.levels[0]))
    G = ev.backbone.select(problem.supervised)
    if problem.spec.has_unsupervised and unsup_coef != 0.0 and config.kind in ("VC", "VM", "Joint"):
        G = GradientMatrix(G.objectives, G.layout, G.array + unsup_coef * ev.backbone.column(UNSUP).data)
    return stationarity_measure(G)


def _record(problem: Problem, config: RecipeConfig, state: OptimizerState) -> dict:
    ev = problem.evaluate(state.params)
    _check_losses(ev)
    coefs, unsup_coef = level_coefficients(config, state.penalty_values) if config.kind in ("VS", "VC", "VM") \
        else ([1.0], state.penalty_values.get("unsup", 0.0))
    lam, lam_u = {}, None
    if config.kind not in ("VS", "VC", "VM"):
        m = len(problem.supervised)
        mu = config.static_weights if config.kind == "StaticWeight" else [1.0 / m] * m
        lam["level_1"] = [float(v) for v in mu]
    for p, (lvl, ws) in enumerate(zip(config.levels, state.weights), start=1):
        if config.kind not in ("VS", "VC", "VM"):
            break
        vals = ws.lam.values
        if UNSUP in lvl:
            lam_u = float(vals[lvl.index(UNSUP)])
            vals = [v for o, v in zip(lvl, vals) if o != UNSUP]
        lam[f"level_{p}"] = [float(v) for v in vals]
    gap = None
    if problem.spec.has_unsupervised and problem.spec.unsup_optimum is not None:
        gap = ev.losses[UNSUP] - problem.spec.unsup_optimum
    pd = pareto_distance(problem, state.params) if problem.spec.known_pareto is not None else None
    restriction = state.weights[0].restriction if state.weights else None
    rec = {
        "iter": state.iteration,
        "epoch": state.epoch,
        "recipe": config.kind,
        "order": config.order_label,
        "lambda": lam,
        "lambda_u": lam_u,
        "eta": {k: float(v) for k, v in sorted(state.penalty_values.items())},
        "losses": {str(o): float(v) for o, v in ev.losses.items()},
        "stationarity": float(_stationarity(problem, config, ev, unsup_coef)),
        "feasibility_gap": None if gap is None else float(gap),
        "pareto_distance": pd,
        "conflict_layers": sorted(str(b) for b in restriction) if restriction is not None else [],
        "restricted": restriction is not None,
    }
    if state.phase is not None:
        rec["phase"] = state.phase
    return rec


def _check_losses(ev: ObjectiveEval) -> None:
    for o, v in ev.losses.items():
        if not math.isfinite(v) or abs(v) > DIVERGENCE_LIMIT:
            raise NumericalFailure(f"loss {o} = {v!r} exceeds divergence guard {DIVERGENCE_LIMIT:g}")


def train(problem: Problem, config: RecipeConfig, budget: Budget, seed: int = 0,
          initial_params: ParamVector | None = None,
          observer: Callable[[OptimizerState], None] | None = None) -> RunTrace:
    """Run ``budget.epochs`` epochs of ``budget.iters_per_epoch`` iterations.

    Returns the trace (records plus final state). Records are logged at
    iteration 0, every ``log_every`` iterations and at each epoch end.
    ``observer`` sees the state after every iteration. Bit-reproducible for
    fixed ``seed``.
    """
    config = config.resolved(problem)
    t0 = time.perf_counter()
    params = initial_params if initial_params is not None else problem.init_params(stream(seed, "init"))
    state = init_state(problem, config, params)
    sampling_seed = int(stream(seed, "sampling").integers(2**31))
    acc = GradientAccumulator(problem.objectives, problem.backbone_layout, config.warmup_epochs)
    report = None
    two_phase = config.kind in ("TwoStage", "StaticWeight")
    total_epochs = budget.epochs + (config.pretrain_epochs if two_phase else 0)
    n_unlabeled = 2 if config.kind == "VS" else 1
    records: list[dict] = []

    def set_epoch(e: int):
        nonlocal state
        pen = {k: penalty_value(s, e) for k, s in config.penalties.items()}
        phase = None
        if two_phase:
            phase = "pretrain" if e < config.pretrain_epochs else "finetune"
        state = replace(state, epoch=e, penalty_values=pen, phase=phase)

    def abort(exc: Exception):
        records.append({"error": "numerical", "iter": state.iteration, "epoch": state.epoch, "message": str(exc)})
        raise TrainingAborted(str(exc), RunTrace(records, state, acc, report)) from exc

    try:
        set_epoch(0)
        records.append(_record(problem, config, state))
        for e in range(total_epochs):
            set_epoch(e)
            if config.efficient_mode and e == config.warmup_epochs and acc.count > 0 and report is None:
                report = detect_conflicting_layers(acc, mode=config.conflict_mode, tau=config.conflict_tau,
                                                   objectives=_lambda_objectives(config)
                                                   if len(_lambda_objectives(config)) > 1 else None)
                restriction = frozenset(report.conflicting_layers)
                state = replace(state, weights=[replace(w, restriction=restriction) for w in state.weights])
            for _ in range(budget.iters_per_epoch):
                k = state.iteration
                batches = sample_batches(problem, sampling_seed, k, budget.batch_size, n_unlabeled)
                xi1, xi2, zeta = batches[0], batches[1], batches[2]
                eval1 = problem.evaluate(state.params, xi1, zeta)
                _check_losses(eval1)
                acc.add(e, eval1.backbone)
                if config.kind in ("VS", "VC", "VM"):
                    zeta2 = batches[3] if config.kind == "VS" else zeta
                    eval2 = problem.evaluate(state.params, xi2, zeta2)
                    state = msp_step(state, problem, config, eval1, eval2)
                elif config.kind == "Joint":
                    state = joint_step(state, problem, config, eval1)
                elif state.phase == "pretrain":
                    state = pretrain_step(state, problem, config, eval1)
                elif config.kind == "TwoStage":
                    state = finetune_step(state, problem, config, eval1)
                else:
                    state = static_weight_step(state, problem, config, eval1)
                if observer is not None:
                    observer(state)
                last_in_epoch = state.iteration % budget.iters_per_epoch == 0
                if state.iteration % budget.log_every == 0 or last_in_epoch:
                    records.append(_record(problem, config, state))
    except TrainingAborted:
        raise
    except NumericalFailure as exc:
        abort(exc)
    except FloatingPointError as exc:
        abort(exc)

    records.append({"final": True, "params_hash": state.params.digest(),
                    "wallclock_ms": (time.perf_counter() - t0) * 1e3})
    return RunTrace(records, state, acc, report)


def two_stage_run(problem: Problem, config: RecipeConfig, budget: Budget, seed: int = 0,
                  initial_params: ParamVector | None = None, observer=None) -> RunTrace:
    if config.kind != "TwoStage":
        raise ConfigError("two_stage_run needs a TwoStage config")
    return train(problem, config, budget, seed, initial_params, observer)


def final_lambda(trace: RunTrace) -> list[SimplexWeights]:
    return [w.lam for w in trace.state.weights]
