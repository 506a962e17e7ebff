"""Quadratic objective families with known Pareto geometry."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..param_space import UNSUP, Backbone, ParamVector, Supervised
from .base import Problem, ProblemSpec


def _split(vec: np.ndarray, dims: Sequence[int]) -> list[np.ndarray]:
    return np.split(vec, np.cumsum(dims)[:-1])


class QuadraticSoup(Problem):
    """``l_m(theta, phi_m) = s_m/2 ||theta - c_m - z||^2 + 1/2 ||phi_m - y_m||^2``.

    ``z`` is the mean of ``batch`` draws of ``noise_scale * N(0, I)`` per
    objective (zero for full batches), so sampled gradients are unbiased. The
    Pareto set in ``theta`` is the convex hull of the centers for any positive
    curvatures ``s_m``. Heads are decoupled from the backbone by design.
    """

    default_fd_step = 1.0  # central differences are exact on quadratics

    def __init__(self, centers, noise_scale: float = 0.0, scales=None, head_dim: int = 1,
                 head_targets=None, block_dims: Sequence[int] | None = None,
                 unsup_center=None, unsup_scale: float = 1.0):
        C = np.atleast_2d(np.asarray(centers, dtype=float))
        M, dim = C.shape
        if M < 1 or dim < 1:
            raise ValueError("need at least one center of positive dimension")
        if len({tuple(c) for c in C.tolist()}) != M:
            raise ValueError("centers must be distinct")
        block_dims = list(block_dims) if block_dims is not None else [dim]
        if sum(block_dims) != dim or any(d <= 0 for d in block_dims):
            raise ValueError("block_dims must be positive and sum to the center dimension")
        self.centers = C
        self.scales = np.ones(M) if scales is None else np.asarray(scales, dtype=float)
        if self.scales.shape != (M,) or np.any(self.scales <= 0):
            raise ValueError("scales must be positive, one per center")
        self.noise_scale = float(noise_scale)
        self.head_targets = np.zeros((M, head_dim)) if head_targets is None else np.asarray(head_targets, dtype=float).reshape(M, head_dim)
        self.unsup_center = None if unsup_center is None else np.asarray(unsup_center, dtype=float).reshape(dim)
        self.unsup_scale = float(unsup_scale)
        self.block_dims = block_dims
        self.stochastic = self.noise_scale > 0
        objectives = tuple(Supervised(m, 0) for m in range(M))
        if self.unsup_center is not None:
            objectives += (UNSUP,)
        self.spec = ProblemSpec(
            name="quadratic_soup",
            backbone_blocks=tuple((Backbone(i), d) for i, d in enumerate(block_dims)),
            heads=tuple(((m, 0), head_dim) for m in range(M)),
            objectives=objectives,
            has_unsupervised=self.unsup_center is not None,
            known_pareto=C.copy(),
            unsup_optimum=0.0 if self.unsup_center is not None else None,
            params={"centers": C.tolist(), "noise_scale": self.noise_scale, "scales": self.scales.tolist(),
                    "head_dim": head_dim, "head_targets": self.head_targets.tolist(), "block_dims": block_dims,
                    "unsup_center": None if self.unsup_center is None else self.unsup_center.tolist(),
                    "unsup_scale": self.unsup_scale},
        )
        self._setup_layout()

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        return ParamVector(self.layout, rng.standard_normal(self.layout.size))

    def _noise(self, batch, count: int) -> np.ndarray:
        dim = self.centers.shape[1]
        if batch.full or self.noise_scale == 0:
            return np.zeros((count, dim))
        draws = batch.rng().standard_normal((count, batch.size, dim))
        return self.noise_scale * draws.mean(axis=1)

    def _evaluate(self, params, labeled, unlabeled, grads):
        theta = self.backbone_vector(params)
        z = self._noise(labeled, len(self.supervised))
        losses, bg, hg = {}, {}, {}
        for m, o in enumerate(self.supervised):
            r = theta - self.centers[m] - z[m]
            phi = params[o.head]
            e = phi - self.head_targets[m]
            losses[o] = float(0.5 * self.scales[m] * (r @ r) + 0.5 * (e @ e))
            bg[o] = self.scales[m] * r
            hg[o] = e
        if self.unsup_center is not None:
            r = theta - self.unsup_center - self._noise(unlabeled, 1)[0]
            losses[UNSUP] = float(0.5 * self.unsup_scale * (r @ r))
            bg[UNSUP] = self.unsup_scale * r
        return losses, bg, hg

    def perturbed(self, objective: Supervised, rng: np.random.Generator) -> "QuadraticSoup":
        """Copy whose ``objective`` has a shifted center and head target."""
        m = self.supervised.index(objective)
        C = self.centers.copy()
        C[m] += rng.standard_normal(C.shape[1])
        Y = self.head_targets.copy()
        Y[m] += rng.standard_normal(Y.shape[1])
        return QuadraticSoup(C, self.noise_scale, self.scales, Y.shape[1], Y, self.block_dims,
                             self.unsup_center, self.unsup_scale)


def quadratic_soup(M: int = 2, dim: int = 2, centers=None, noise_scale: float = 0.0, seed: int = 0,
                   **kwargs) -> QuadraticSoup:
    """Build a quadratic soup; random centers from ``seed`` if none given."""
    if centers is None:
        if M < 1:
            raise ValueError("M must be positive")
        centers = np.random.default_rng(seed).standard_normal((M, dim))
    return QuadraticSoup(centers, noise_scale=noise_scale, **kwargs)


class ConflictByConstruction(Problem):
    """Two objectives that conflict exactly on a chosen set of backbone blocks.

    On planted blocks ``l_1 = <a_b, theta_b>`` and ``l_2 = -kappa <a_b, theta_b>``
    (gradients exact negatives when ``kappa = 1``); on the remaining blocks
    both share ``1/2 ||theta_b - s_b||^2``, so their gradients are identical
    there. The linear terms are unbounded below: use for analysis and short
    runs only.
    """

    default_fd_step = 1.0

    def __init__(self, conflict_blocks: Sequence[int], block_dims: Sequence[int], kappa: float = 1.0,
                 seed: int = 0, head_dim: int = 1):
        block_dims = list(block_dims)
        if not block_dims:
            raise ValueError("need at least one backbone block")
        conflict = sorted(set(int(b) for b in conflict_blocks))
        if any(b < 0 or b >= len(block_dims) for b in conflict):
            raise ValueError("conflict blocks must index declared backbone blocks")
        if kappa <= 0:
            raise ValueError("kappa must be positive")
        rng = np.random.default_rng(seed)
        self.block_dims = block_dims
        self.conflict = conflict
        self.kappa = float(kappa)
        self.a = [rng.standard_normal(d) for d in block_dims]
        self.s = [rng.standard_normal(d) for d in block_dims]
        self.spec = ProblemSpec(
            name="conflict_by_construction",
            backbone_blocks=tuple((Backbone(i), d) for i, d in enumerate(block_dims)),
            heads=(((0, 0), head_dim), ((0, 1), head_dim)),
            objectives=(Supervised(0, 0), Supervised(0, 1)),
            has_unsupervised=False,
            params={"layer_conflict_set": conflict, "dims": block_dims, "kappa": self.kappa,
                    "seed": seed, "head_dim": head_dim},
        )
        self._setup_layout()

    @property
    def conflict_ids(self) -> frozenset[Backbone]:
        return frozenset(Backbone(b) for b in self.conflict)

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        return ParamVector(self.layout, rng.standard_normal(self.layout.size))

    def _evaluate(self, params, labeled, unlabeled, grads):
        theta = _split(self.backbone_vector(params), self.block_dims)
        l1 = l2 = 0.0
        g1, g2 = [], []
        for b, tb in enumerate(theta):
            if b in self.conflict:
                l1 += float(self.a[b] @ tb)
                l2 -= self.kappa * float(self.a[b] @ tb)
                g1.append(self.a[b])
                g2.append(-self.kappa * self.a[b])
            else:
                r = tb - self.s[b]
                l1 += 0.5 * float(r @ r)
                l2 += 0.5 * float(r @ r)
                g1.append(r)
                g2.append(r)
        o1, o2 = self.supervised
        losses, hg = {}, {}
        for o, base in ((o1, l1), (o2, l2)):
            phi = params[o.head]
            losses[o] = base + 0.5 * float(phi @ phi)
            hg[o] = phi.copy()
        return losses, {o1: np.concatenate(g1), o2: np.concatenate(g2)}, hg


def conflict_by_construction(layer_conflict_set: Sequence[int], dims: Sequence[int], **kwargs) -> ConflictByConstruction:
    return ConflictByConstruction(layer_conflict_set, dims, **kwargs)
