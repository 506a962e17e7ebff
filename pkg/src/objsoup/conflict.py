"""Gradient-conflict measurement and conflicting-layer detection.

Two objectives conflict when the cosine between their gradients is strictly
negative. Per-layer cosines are computed from gradients averaged over a
warmup window of epochs; a layer is flagged when its conflicting pairs have a
negative mean cosine (the default, literal rule) or, in threshold mode, when
the mean over all pairs falls below ``tau``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .param_space import (
    Backbone,
    BlockId,
    GradientMatrix,
    Layout,
    ObjectiveId,
    ParamVector,
    StructureError,
    inner,
    parse_block,
    parse_objective,
)

DEGENERATE_NORM = 1e-15
GLOBAL = "global"


def cosine(g_i: ParamVector, g_j: ParamVector, blocks: Iterable[BlockId] | None = None,
           *, with_flag: bool = False):
    """Cosine similarity over ``blocks``.

    Returns 0 when either norm is below 1e-15; with ``with_flag`` the result is
    a ``(value, degenerate)`` tuple.
    """
    if blocks is not None:
        blocks = list(blocks)
    ni = np.sqrt(inner(g_i, g_i, blocks))
    nj = np.sqrt(inner(g_j, g_j, blocks))
    if ni < DEGENERATE_NORM or nj < DEGENERATE_NORM:
        return (0.0, True) if with_flag else 0.0
    c = float(np.clip(inner(g_i, g_j, blocks) / (ni * nj), -1.0, 1.0))
    return (c, False) if with_flag else c


def _cosine_matrix(rows: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", rows, rows))
    live = norms >= DEGENERATE_NORM
    safe = np.where(live, norms, 1.0)
    unit = rows / safe[:, None]
    C = np.clip(unit @ unit.T, -1.0, 1.0)
    C[~live, :] = 0.0
    C[:, ~live] = 0.0
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 1.0)
    return C


def pairwise_matrix(grads: Sequence[ParamVector] | GradientMatrix, blocks: Iterable[BlockId] | None = None) -> np.ndarray:
    """Symmetric matrix of pairwise cosines with unit diagonal."""
    if isinstance(grads, GradientMatrix):
        layout, rows = grads.layout, grads.array
    else:
        grads = list(grads)
        if not grads:
            raise ValueError("need gradients")
        layout = grads[0].layout
        for g in grads[1:]:
            if g.layout != layout:
                raise StructureError("block structures differ")
        rows = np.stack([g.data for g in grads])
    if rows.shape[0] < 2:
        raise ValueError("pairwise cosines need at least two gradients")
    idx = layout.index(list(blocks) if blocks is not None else None)
    return _cosine_matrix(rows[:, idx])


class GradientAccumulator:
    """Running per-objective gradient sums over the first ``window`` epochs.

    Sums are kept per epoch and reduced in epoch order when a report is
    requested, so the result does not depend on the order epochs arrived in.
    """

    def __init__(self, objectives: Sequence[ObjectiveId], layout: Layout, window: int = 20):
        if window < 1:
            raise ValueError("warmup window must be at least one epoch")
        self.objectives = tuple(objectives)
        self.layout = layout
        self.window = window
        self._sums: dict[int, np.ndarray] = {}
        self._counts: dict[int, int] = {}

    def add(self, epoch: int, G: GradientMatrix) -> bool:
        """Record one gradient sample; returns False once outside the window."""
        if epoch >= self.window:
            return False
        if G.layout != self.layout:
            raise StructureError("gradient layout differs from accumulator layout")
        rows = G.select(self.objectives).array
        if epoch in self._sums:
            self._sums[epoch] = self._sums[epoch] + rows
            self._counts[epoch] += 1
        else:
            self._sums[epoch] = rows.copy()
            self._counts[epoch] = 1
        return True

    @property
    def count(self) -> int:
        return sum(self._counts.values())

    @property
    def epochs_observed(self) -> int:
        return len(self._sums)

    @property
    def full(self) -> bool:
        return self.epochs_observed >= self.window

    def mean(self) -> GradientMatrix:
        if not self._sums:
            raise ValueError("accumulator is empty")
        total = np.zeros((len(self.objectives), self.layout.size))
        for e in sorted(self._sums):
            total += self._sums[e]
        return GradientMatrix(self.objectives, self.layout, total / self.count)

    def subset(self, objectives: Sequence[ObjectiveId]) -> "GradientAccumulator":
        acc = GradientAccumulator(objectives, self.layout, self.window)
        rows = [self.objectives.index(o) for o in objectives]
        acc._sums = {e: s[rows].copy() for e, s in self._sums.items()}
        acc._counts = dict(self._counts)
        return acc

    def to_npz(self, path) -> None:
        epochs = sorted(self._sums)
        np.savez(
            path,
            objectives=np.array([str(o) for o in self.objectives]),
            block_ids=np.array([str(b) for b in self.layout.ids]),
            block_dims=np.array(self.layout.dims),
            window=np.array(self.window),
            epochs=np.array(epochs, dtype=np.int64),
            counts=np.array([self._counts[e] for e in epochs], dtype=np.int64),
            sums=np.stack([self._sums[e] for e in epochs]) if epochs else np.zeros((0, len(self.objectives), self.layout.size)),
        )

    @classmethod
    def from_npz(cls, path) -> "GradientAccumulator":
        with np.load(path) as z:
            layout = Layout(tuple(parse_block(str(b)) for b in z["block_ids"]), tuple(int(d) for d in z["block_dims"]))
            acc = cls([parse_objective(str(o)) for o in z["objectives"]], layout, int(z["window"]))
            for e, c, s in zip(z["epochs"], z["counts"], z["sums"]):
                acc._sums[int(e)] = np.array(s)
                acc._counts[int(e)] = int(c)
        return acc


@dataclass(frozen=True)
class ConflictReport:
    objective_ids: tuple[ObjectiveId, ...]
    global_cosine: np.ndarray
    per_layer_cosine: dict[BlockId, np.ndarray]
    conflicting_pairs: dict[BlockId, frozenset[tuple[int, int]]]
    conflicting_layers: frozenset[BlockId]
    epochs_observed: int
    mode: str = "literal"
    tau: float = 0.0
    degenerate_layers: frozenset[BlockId] = field(default_factory=frozenset)

    def rows(self, per_layer: bool = True) -> list[dict]:
        """One row per (layer, ordered objective pair), diagonal excluded."""
        tables = [(GLOBAL, self.global_cosine)]
        if per_layer:
            tables += [(str(b), self.per_layer_cosine[b]) for b in sorted(self.per_layer_cosine)]
        out = []
        names = [str(o) for o in self.objective_ids]
        for layer, C in tables:
            for i, a in enumerate(names):
                for j, b in enumerate(names):
                    if i != j:
                        out.append({"layer_id": layer, "obj_i": a, "obj_j": b,
                                    "cosine": float(C[i, j]), "conflicting": bool(C[i, j] < 0)})
        return out

    def to_csv(self, per_layer: bool = True) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["layer_id", "obj_i", "obj_j", "cosine", "conflicting"], lineterminator="\n")
        w.writeheader()
        for r in self.rows(per_layer):
            w.writerow({**r, "cosine": repr(r["cosine"]), "conflicting": int(r["conflicting"])})
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "objective_ids": [str(o) for o in self.objective_ids],
            "global_cosine": self.global_cosine.tolist(),
            "per_layer_cosine": {str(b): C.tolist() for b, C in sorted(self.per_layer_cosine.items())},
            "conflicting_pairs": {str(b): sorted(map(list, p)) for b, p in sorted(self.conflicting_pairs.items())},
            "conflicting_layers": [str(b) for b in sorted(self.conflicting_layers)],
            "degenerate_layers": [str(b) for b in sorted(self.degenerate_layers)],
            "epochs_observed": self.epochs_observed,
            "mode": self.mode,
            "tau": self.tau,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ConflictReport":
        doc = json.loads(text)
        return cls(
            objective_ids=tuple(parse_objective(o) for o in doc["objective_ids"]),
            global_cosine=np.array(doc["global_cosine"]),
            per_layer_cosine={parse_block(b): np.array(C) for b, C in doc["per_layer_cosine"].items()},
            conflicting_pairs={parse_block(b): frozenset(tuple(p) for p in ps) for b, ps in doc["conflicting_pairs"].items()},
            conflicting_layers=frozenset(parse_block(b) for b in doc["conflicting_layers"]),
            epochs_observed=doc["epochs_observed"],
            mode=doc["mode"],
            tau=doc["tau"],
            degenerate_layers=frozenset(parse_block(b) for b in doc.get("degenerate_layers", [])),
        )


def detect_conflicting_layers(acc: GradientAccumulator, *, mode: str = "literal", tau: float = 0.0,
                              objectives: Sequence[ObjectiveId] | None = None) -> ConflictReport:
    """Flag backbone blocks whose mean per-objective gradients conflict.

    ``mode="literal"``: flagged iff some pair has negative cosine and the mean
    cosine over those negative pairs is negative.
    ``mode="threshold"``: flagged iff the mean cosine over all pairs is < ``tau``.
    """
    if mode not in ("literal", "threshold"):
        raise ValueError(f"unknown detection mode {mode!r}")
    if acc.count == 0:
        raise ValueError("accumulator is empty; run at least one epoch first")
    if objectives is not None:
        acc = acc.subset(objectives)
    if len(acc.objectives) < 2:
        raise ValueError("conflict detection needs at least two objectives")
    G = acc.mean()
    rows = G.array
    M = rows.shape[0]
    iu = np.triu_indices(M, k=1)

    per_layer, pairs, flagged, degenerate = {}, {}, set(), set()
    for b in G.layout.ids:
        if not isinstance(b, Backbone):
            continue
        sub = rows[:, G.layout.slice(b)]
        C = _cosine_matrix(sub)
        per_layer[b] = C
        if np.any(np.sqrt(np.einsum("ij,ij->i", sub, sub)) < DEGENERATE_NORM):
            degenerate.add(b)
        neg = frozenset((int(i), int(j)) for i, j in zip(*iu) if C[i, j] < 0)
        pairs[b] = neg
        if mode == "literal":
            if neg and np.mean([C[i, j] for i, j in sorted(neg)]) < 0:
                flagged.add(b)
        elif np.mean(C[iu]) < tau:
            flagged.add(b)

    return ConflictReport(
        objective_ids=acc.objectives,
        global_cosine=_cosine_matrix(rows),
        per_layer_cosine=per_layer,
        conflicting_pairs=pairs,
        conflicting_layers=frozenset(flagged),
        epochs_observed=acc.epochs_observed,
        mode=mode,
        tau=tau,
        degenerate_layers=frozenset(degenerate),
    )
