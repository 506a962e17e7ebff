"""Dynamic objective weighting.

* ``modo_step``: projected stochastic step on the weights using the product of
  two independently sampled gradient matrices (double sampling).
* ``ca_direction``: the conflict-avoiding direction ``-G @ lam``.
* ``stationarity_measure``: ``min_{lam in simplex} ||G lam||``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .param_space import BlockId, GradientMatrix, NumericalFailure, ParamVector, StructureError, combine
from .simplex import SimplexWeights, project, project_array

DEFAULT_GAMMA = 0.01


def gram(G1: GradientMatrix, G2: GradientMatrix, restriction: Iterable[BlockId] | None = None) -> np.ndarray:
    """``G1^T G2`` over the restricted blocks. Not symmetric in general."""
    if G1.objectives != G2.objectives:
        raise StructureError("objective ordering differs between gradient samples")
    if G1.layout != G2.layout:
        raise StructureError("gradient layouts differ")
    idx = G1.layout.index(list(restriction) if restriction is not None else None)
    return G1.array[:, idx] @ G2.array[:, idx].T


@dataclass(frozen=True)
class WeightState:
    lam: SimplexWeights
    gamma: float = DEFAULT_GAMMA
    schedule: str = "constant"  # or "inv_sqrt": gamma / sqrt(k + 1)
    iteration: int = 0
    restriction: frozenset[BlockId] | None = None

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be nonnegative")
        if self.schedule not in ("constant", "inv_sqrt"):
            raise ValueError(f"unknown gamma schedule {self.schedule!r}")

    @property
    def step_size(self) -> float:
        if self.schedule == "inv_sqrt":
            return self.gamma / np.sqrt(self.iteration + 1)
        return self.gamma


def modo_step(state: WeightState, G1: GradientMatrix, G2: GradientMatrix) -> WeightState:
    lam = state.lam.values
    if lam.size != len(G1):
        raise StructureError(f"{lam.size} weights for {len(G1)} objectives")
    with np.errstate(invalid="ignore", over="ignore"):
        A = gram(G1, G2, state.restriction)
    if not np.all(np.isfinite(A)):
        raise NumericalFailure("non-finite Gram entries")
    new = project(lam - state.step_size * (A @ lam))
    return replace(state, lam=new, iteration=state.iteration + 1)


@dataclass(frozen=True)
class Direction:
    vector: ParamVector
    weights_used: SimplexWeights
    source_digest: str


def ca_direction(G: GradientMatrix, lam: SimplexWeights) -> Direction:
    d = combine(G, lam)
    return Direction(ParamVector(d.layout, -d.data), lam, G.digest())


def _largest_eigenvalue(A: np.ndarray, iters: int = 500, tol: float = 1e-12) -> float | None:
    """Power iteration on a PSD matrix; None if it fails to settle."""
    v = np.ones(A.shape[0]) / np.sqrt(A.shape[0])
    est = 0.0
    for _ in range(iters):
        w = A @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = float(v @ A @ v)
        if abs(new - est) <= tol * max(new, 1.0):
            return new
        est = new
    return None


def min_norm_weights(G: GradientMatrix, tol: float = 1e-10, max_iter: int = 10000) -> SimplexWeights:
    """Minimiser of ``0.5 ||G lam||^2`` over the simplex by projected gradient.

    Step 1/L with L the top eigenvalue of the Gram matrix (power iteration);
    falls back to 1/trace, which upper-bounds L, if that does not converge.
    Nesterov momentum with function-value restart speeds up the flat,
    rank-deficient cases that appear near Pareto-stationary points.
    """
    with np.errstate(invalid="ignore", over="ignore"):
        A = G.array @ G.array.T
    if not np.all(np.isfinite(A)):
        raise NumericalFailure("non-finite gradients")
    M = A.shape[0]
    lam = np.full(M, 1.0 / M)
    if M == 1:
        return SimplexWeights(lam)
    L = _largest_eigenvalue(A)
    if L is None:
        L = float(np.trace(A))
    if L <= 0.0:
        return SimplexWeights(lam)
    step = 1.0 / L
    y, t = lam, 1.0
    f = 0.5 * lam @ A @ lam
    for _ in range(max_iter):
        new = project_array(y - step * (A @ y))
        f_new = 0.5 * new @ A @ new
        if f_new > f:
            # restart: plain projected step from the last iterate
            new = project_array(lam - step * (A @ lam))
            f_new = 0.5 * new @ A @ new
            t = 1.0
        if np.max(np.abs(new - lam)) < tol:
            # momentum can stall on a face; only a plain step decides convergence
            plain = project_array(new - step * (A @ new))
            if np.max(np.abs(plain - new)) < tol:
                lam = plain
                break
            lam = y = plain
            f, t = 0.5 * plain @ A @ plain, 1.0
            continue
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = new + ((t - 1.0) / t_next) * (new - lam)
        lam, f, t = new, f_new, t_next
    return SimplexWeights(_polish(A, lam))


def _polish(A: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Exact minimiser on the face projected gradient settled on.

    Solves the KKT system restricted to the support of ``lam``. The answer
    replaces ``lam`` only if it stays feasible, satisfies the optimality
    conditions off the support and does not raise the objective. This removes
    the slow tail on badly conditioned Gram matrices.
    """
    S = np.flatnonzero(lam > 0)
    k = S.size
    K = np.zeros((k + 1, k + 1))
    K[:k, :k] = A[np.ix_(S, S)]
    K[:k, k] = K[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    cand = np.zeros_like(lam)
    cand[S] = sol[:k]
    if np.any(cand < 0) or abs(cand.sum() - 1.0) > 1e-12:
        return lam
    g = A @ cand
    scale = max(float(np.max(np.abs(A))), 1e-300)
    mu = float(g[S].mean())
    if np.any(g < mu - 1e-10 * scale):
        return lam
    cand /= cand.sum()
    if cand @ A @ cand > lam @ A @ lam:
        return lam
    return cand


def two_objective_weights(g1: np.ndarray, g2: np.ndarray) -> SimplexWeights:
    """Closed form for M = 2: weight on g1 is clip(<g2 - g1, g2> / ||g1 - g2||^2, 0, 1)."""
    diff = g1 - g2
    den = float(diff @ diff)
    if den == 0.0:
        return SimplexWeights([0.5, 0.5])
    a = float(np.clip((g2 - g1) @ g2 / den, 0.0, 1.0))
    return SimplexWeights([a, 1.0 - a])


def stationarity_measure(G: GradientMatrix, tol: float = 1e-10, max_iter: int = 10000) -> float:
    """``min_{lam in simplex} ||G lam||``; zero exactly at Pareto-stationary points.

    Two objectives use the closed form; more use ``min_norm_weights``.
    """
    if len(G) == 2:
        return combine(G, two_objective_weights(G.array[0], G.array[1])).norm()
    return combine(G, min_norm_weights(G, tol, max_iter)).norm()
