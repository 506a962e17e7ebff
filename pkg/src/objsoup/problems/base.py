"""Problem interface, batch sampling, finite differences and Pareto distance."""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..param_space import (
    UNSUP,
    Backbone,
    GradientMatrix,
    Head,
    Layout,
    NumericalFailure,
    ObjectiveId,
    ParamVector,
    Supervised,
    embed,
)
from ..seeding import stream


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    backbone_blocks: tuple[tuple[Backbone, int], ...]
    heads: tuple[tuple[tuple[int, int], int], ...]
    objectives: tuple[ObjectiveId, ...]
    has_unsupervised: bool
    known_pareto: np.ndarray | None = None  # hull vertices, one per row
    unsup_optimum: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        sup = {o for o in self.objectives if isinstance(o, Supervised)}
        heads = {Supervised(t, n) for (t, n), _ in self.heads}
        if sup != heads:
            raise ValueError("supervised objectives must correspond exactly to head blocks")
        if sum(o == UNSUP for o in self.objectives) > (1 if self.has_unsupervised else 0):
            raise ValueError("inconsistent unsupervised objective declaration")
        if self.has_unsupervised != (UNSUP in self.objectives):
            raise ValueError("has_unsupervised disagrees with objective list")

    @property
    def fingerprint(self) -> str:
        doc = json.dumps({"name": self.name, "params": self.params}, sort_keys=True, default=str)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SampleBatch:
    """A labeled (xi) or unlabeled (zeta) draw.

    ``key`` seeds the generator the problem uses to pick samples; ``size`` of
    None means the full dataset.
    """

    kind: str  # "labeled" | "unlabeled"
    key: tuple[int, ...] | None = None
    size: int | None = None

    @property
    def full(self) -> bool:
        return self.size is None

    def rng(self) -> np.random.Generator:
        return stream(self.key[0], *self.key[1:])


FULL_LABELED = SampleBatch("labeled")
FULL_UNLABELED = SampleBatch("unlabeled")


@dataclass(frozen=True)
class ObjectiveEval:
    losses: dict[ObjectiveId, float]
    backbone: GradientMatrix
    heads: dict[ObjectiveId, ParamVector]
    samples: tuple[SampleBatch, ...] = ()

    def full_gradient(self, objective: ObjectiveId, layout: Layout) -> ParamVector:
        g = embed(self.backbone.column(objective), layout)
        if objective in self.heads:
            g = g.replace(self.heads[objective])
        return g


class Problem:
    """Base class. Subclasses set ``spec`` and implement ``_evaluate``."""

    spec: ProblemSpec
    default_fd_step: float = 1e-5
    stochastic: bool = False

    def _setup_layout(self):
        pairs = list(self.spec.backbone_blocks) + [(Head(t, n), d) for (t, n), d in self.spec.heads]
        self.layout = Layout.from_pairs(pairs)
        self.backbone_layout = self.layout.sub(b for b, _ in self.spec.backbone_blocks)
        self.supervised = tuple(o for o in self.spec.objectives if isinstance(o, Supervised))

    @property
    def objectives(self) -> tuple[ObjectiveId, ...]:
        return self.spec.objectives

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        raise NotImplementedError

    def evaluate(self, params: ParamVector, labeled: SampleBatch = FULL_LABELED,
                 unlabeled: SampleBatch = FULL_UNLABELED, *, grads: bool = True) -> ObjectiveEval:
        if params.layout != self.layout:
            raise ValueError("parameter layout does not match problem")
        losses, bgrads, hgrads = self._evaluate(params, labeled, unlabeled, grads)
        for o, v in losses.items():
            if not np.isfinite(v):
                raise NumericalFailure(f"non-finite loss for {o}")
        if not grads:
            return ObjectiveEval(losses, None, {}, (labeled, unlabeled))
        G = GradientMatrix(self.objectives, self.backbone_layout, np.stack([bgrads[o] for o in self.objectives]))
        heads = {o: ParamVector(self.layout.sub([o.head]), hgrads[o]) for o in self.supervised}
        return ObjectiveEval(losses, G, heads, (labeled, unlabeled))

    def losses(self, params: ParamVector, labeled: SampleBatch = FULL_LABELED,
               unlabeled: SampleBatch = FULL_UNLABELED) -> dict[ObjectiveId, float]:
        return self.evaluate(params, labeled, unlabeled, grads=False).losses

    def _evaluate(self, params, labeled, unlabeled, grads):
        raise NotImplementedError

    def backbone_vector(self, params: ParamVector) -> np.ndarray:
        return params.data[self.layout.index(self.backbone_layout.ids)]


def sample_batches(problem: Problem, seed: int, iteration: int, batch_size: int | None = None,
                   n_unlabeled: int = 1) -> tuple[SampleBatch, ...]:
    """Independent labeled draws xi1, xi2 and ``n_unlabeled`` unlabeled draws.

    Deterministic problems (or ``batch_size=None``) get full batches, which
    makes the double-sampled update collapse to the deterministic one.
    """
    if not problem.stochastic or batch_size is None:
        return (FULL_LABELED, FULL_LABELED) + (FULL_UNLABELED,) * n_unlabeled
    out = [SampleBatch("labeled", (seed, iteration, 1), batch_size),
           SampleBatch("labeled", (seed, iteration, 2), batch_size)]
    out += [SampleBatch("unlabeled", (seed, iteration, 3 + i), batch_size) for i in range(n_unlabeled)]
    return tuple(out)


def finite_diff_gradient(problem: Problem, params: ParamVector, h: float | None = None) -> dict[ObjectiveId, ParamVector]:
    """Central differences of every objective, full batch, all coordinates."""
    h = problem.default_fd_step if h is None else h
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    x = params.data
    out = {o: np.zeros(x.size) for o in problem.objectives}
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        lp = problem.losses(ParamVector(params.layout, xp))
        lm = problem.losses(ParamVector(params.layout, xm))
        for o in problem.objectives:
            out[o][i] = (lp[o] - lm[o]) / (2 * h)
    return {o: ParamVector(params.layout, g) for o, g in out.items()}


def gradient_errors(problem: Problem, params: ParamVector, h: float | None = None,
                    corrupt: bool = False) -> dict[ObjectiveId, tuple[float, int]]:
    """Norm-wise relative error analytic vs finite-difference, plus worst coordinate."""
    ev = problem.evaluate(params)
    fd = finite_diff_gradient(problem, params, h)
    out = {}
    for o in problem.objectives:
        a = ev.full_gradient(o, params.layout).data.copy()
        if corrupt:
            a[0] += 1.0
        f = fd[o].data
        diff = np.abs(a - f)
        scale = max(np.linalg.norm(a), np.linalg.norm(f), 1e-12)
        out[o] = (float(np.linalg.norm(diff) / scale), int(np.argmax(diff)))
    return out


def hull_distance(point: np.ndarray, vertices: np.ndarray) -> float:
    """Euclidean distance from ``point`` to the convex hull of ``vertices`` rows.

    Enumerates faces (vertex subsets), projects onto each affine hull and
    keeps the nearest feasible projection. Exact, exponential in the vertex
    count; fine for the handful of centers used here.
    """
    point = np.asarray(point, dtype=float)
    V = np.atleast_2d(np.asarray(vertices, dtype=float))
    if V.shape[0] == 1:
        return float(np.linalg.norm(point - V[0]))
    if V.shape[0] == 2:
        a, b = V
        seg = b - a
        den = seg @ seg
        t = 0.0 if den == 0 else float(np.clip((point - a) @ seg / den, 0.0, 1.0))
        return float(np.linalg.norm(point - (a + t * seg)))
    best = np.inf
    m = V.shape[0]
    for r in range(1, m + 1):
        for S in itertools.combinations(range(m), r):
            P = V[list(S)]
            # minimise ||point - P^T w|| subject to sum(w) = 1 via KKT system
            K = np.zeros((r + 1, r + 1))
            K[:r, :r] = P @ P.T
            K[:r, r] = 1.0
            K[r, :r] = 1.0
            rhs = np.concatenate([P @ point, [1.0]])
            w = np.linalg.lstsq(K, rhs, rcond=None)[0][:r]
            if np.all(w >= -1e-12):
                best = min(best, float(np.linalg.norm(point - w @ P)))
    return best


def pareto_distance(problem: Problem, params: ParamVector) -> float:
    if problem.spec.known_pareto is None:
        raise ValueError(f"problem {problem.spec.name!r} has no analytic Pareto set")
    return hull_distance(problem.backbone_vector(params), problem.spec.known_pareto)


def objective_names(objectives: Sequence[ObjectiveId]) -> list[str]:
    return [str(o) for o in objectives]
