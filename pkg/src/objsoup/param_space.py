"""Partitioned parameter vectors and per-objective gradient containers.

A :class:`ParamVector` is a flat float64 array plus a :class:`Layout` that
names contiguous slices of it ("blocks"). Backbone blocks are the shared
layers; head blocks belong to exactly one supervised objective.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class StructureError(ValueError):
    """Two vectors (or a vector and a filter) do not share block structure."""


class NumericalFailure(ArithmeticError):
    """A library-produced value became NaN/Inf or diverged."""


@dataclass(frozen=True, order=True)
class Backbone:
    index: int

    def __str__(self) -> str:
        return f"layer{self.index}"


@dataclass(frozen=True, order=True)
class Head:
    language: int
    task: int

    def __str__(self) -> str:
        return f"head_t{self.language}_n{self.task}"


BlockId = Backbone | Head


def parse_block(name: str) -> BlockId:
    if name.startswith("layer"):
        return Backbone(int(name[5:]))
    if name.startswith("head_t"):
        t, n = name[6:].split("_n")
        return Head(int(t), int(n))
    raise ValueError(f"unrecognised block id {name!r}")


@dataclass(frozen=True, order=True)
class Supervised:
    language: int
    task: int

    def __str__(self) -> str:
        return f"t{self.language}_n{self.task}"

    @property
    def head(self) -> Head:
        return Head(self.language, self.task)


@dataclass(frozen=True, order=True)
class Unsupervised:
    def __str__(self) -> str:
        return "unsup"


ObjectiveId = Supervised | Unsupervised
UNSUP = Unsupervised()


def parse_objective(name: str) -> ObjectiveId:
    if name == "unsup":
        return UNSUP
    if name.startswith("t") and "_n" in name:
        t, n = name[1:].split("_n")
        return Supervised(int(t), int(n))
    raise ValueError(f"unrecognised objective id {name!r}")


@dataclass(frozen=True)
class Layout:
    """Ordered block ids with their dimensions."""

    ids: tuple[BlockId, ...]
    dims: tuple[int, ...]
    _offsets: dict = field(init=False, repr=False, compare=False, hash=False)
    _index_cache: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if len(self.ids) != len(self.dims):
            raise StructureError("ids and dims differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise StructureError("duplicate block ids")
        if any(d <= 0 for d in self.dims):
            raise StructureError("block dimensions must be positive")
        backbone = sorted(b.index for b in self.ids if isinstance(b, Backbone))
        if backbone != list(range(len(backbone))):
            raise StructureError("backbone indices must form a contiguous range 0..L-1")
        offsets, start = {}, 0
        for b, d in zip(self.ids, self.dims):
            offsets[b] = slice(start, start + d)
            start += d
        object.__setattr__(self, "_offsets", offsets)
        object.__setattr__(self, "_index_cache", {})

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[BlockId, int]]) -> "Layout":
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), tuple(int(p[1]) for p in pairs))

    @property
    def size(self) -> int:
        return sum(self.dims)

    @property
    def backbone_ids(self) -> tuple[BlockId, ...]:
        return tuple(b for b in self.ids if isinstance(b, Backbone))

    @property
    def head_ids(self) -> tuple[BlockId, ...]:
        return tuple(b for b in self.ids if isinstance(b, Head))

    def dim(self, block: BlockId) -> int:
        return self.dims[self.ids.index(block)]

    def slice(self, block: BlockId) -> slice:
        try:
            return self._offsets[block]
        except KeyError:
            raise StructureError(f"block {block} not in layout") from None

    def index(self, blocks: Iterable[BlockId] | None) -> np.ndarray | slice:
        """Flat indices covering ``blocks`` (layout order); everything if None."""
        if blocks is None:
            return slice(None)
        key = frozenset(blocks)
        cached = self._index_cache.get(key)
        if cached is None:
            missing = key - set(self.ids)
            if missing:
                raise StructureError(f"filter blocks {sorted(map(str, missing))} not in layout")
            parts = [np.arange(self._offsets[b].start, self._offsets[b].stop) for b in self.ids if b in key]
            cached = np.concatenate(parts) if parts else np.zeros(0, dtype=np.intp)
            self._index_cache[key] = cached
        return cached

    def sub(self, blocks: Iterable[BlockId]) -> "Layout":
        keep = set(blocks)
        return Layout.from_pairs((b, d) for b, d in zip(self.ids, self.dims) if b in keep)


def _check_same(a: Layout, b: Layout) -> None:
    if a is not b and a != b:
        raise StructureError("block structures differ")


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalFailure(f"non-finite values in {what}")


class ParamVector:
    """Immutable block-structured real vector."""

    __slots__ = ("layout", "data")

    def __init__(self, layout: Layout, data):
        data = np.array(data, dtype=np.float64).reshape(-1)
        if data.size != layout.size:
            raise StructureError(f"data has {data.size} entries, layout expects {layout.size}")
        data.flags.writeable = False
        self.layout = layout
        self.data = data

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(layout, np.zeros(layout.size))

    @classmethod
    def from_blocks(cls, blocks: dict[BlockId, np.ndarray] | Sequence[tuple[BlockId, np.ndarray]]) -> "ParamVector":
        items = list(blocks.items()) if isinstance(blocks, dict) else list(blocks)
        arrays = [np.asarray(v, dtype=np.float64).reshape(-1) for _, v in items]
        layout = Layout(tuple(k for k, _ in items), tuple(a.size for a in arrays))
        return cls(layout, np.concatenate(arrays) if arrays else np.zeros(0))

    @property
    def ids(self) -> tuple[BlockId, ...]:
        return self.layout.ids

    def __getitem__(self, block: BlockId) -> np.ndarray:
        return self.data[self.layout.slice(block)]

    def __len__(self) -> int:
        return self.data.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.data, other.data)

    def __repr__(self) -> str:
        return f"ParamVector({', '.join(f'{b}: {self[b].tolist()}' for b in self.ids)})"

    def restrict(self, blocks: Iterable[BlockId]) -> "ParamVector":
        sub = self.layout.sub(blocks)
        return ParamVector(sub, np.concatenate([self[b] for b in sub.ids]) if sub.ids else np.zeros(0))

    def replace(self, other: "ParamVector") -> "ParamVector":
        """Copy of self with every block of ``other`` overwritten."""
        out = self.data.copy()
        for b in other.ids:
            sl = self.layout.slice(b)
            if sl.stop - sl.start != other.layout.dim(b):
                raise StructureError(f"block {b} dimension mismatch")
            out[sl] = other[b]
        return ParamVector(self.layout, out)

    def norm(self, blocks: Iterable[BlockId] | None = None) -> float:
        return float(np.sqrt(inner(self, self, blocks)))

    def digest(self) -> str:
        h = hashlib.sha256()
        for b, d in zip(self.layout.ids, self.layout.dims):
            h.update(f"{b}:{d};".encode())
        h.update(np.ascontiguousarray(self.data).tobytes())
        return h.hexdigest()


def axpy(target: ParamVector, scale: float, direction: ParamVector, blocks: Iterable[BlockId] | None = None) -> ParamVector:
    """``target + scale * direction`` on ``blocks`` (all blocks if None)."""
    _check_same(target.layout, direction.layout)
    idx = target.layout.index(blocks)
    out = target.data.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        out[idx] += scale * direction.data[idx]
    _check_finite(out, "axpy result")
    return ParamVector(target.layout, out)


def inner(g1: ParamVector, g2: ParamVector, blocks: Iterable[BlockId] | None = None) -> float:
    _check_same(g1.layout, g2.layout)
    idx = g1.layout.index(blocks)
    return float(np.dot(g1.data[idx], g2.data[idx]))


class GradientMatrix:
    """Backbone gradients of several objectives, one column per objective.

    Stored as an ``(M, D)`` array so Gram products are a single matmul.
    """

    __slots__ = ("objectives", "layout", "array")

    def __init__(self, objectives: Sequence[ObjectiveId], layout: Layout, array):
        array = np.array(array, dtype=np.float64).reshape(len(objectives), layout.size)
        if len(set(objectives)) != len(objectives):
            raise StructureError("duplicate objectives")
        if layout.head_ids:
            raise StructureError("gradient matrices hold backbone blocks only")
        array.flags.writeable = False
        self.objectives = tuple(objectives)
        self.layout = layout
        self.array = array

    @classmethod
    def from_columns(cls, columns: dict[ObjectiveId, ParamVector] | Sequence[tuple[ObjectiveId, ParamVector]]) -> "GradientMatrix":
        items = list(columns.items()) if isinstance(columns, dict) else list(columns)
        if not items:
            raise StructureError("at least one column required")
        layout = items[0][1].layout
        for _, v in items:
            _check_same(layout, v.layout)
        return cls([k for k, _ in items], layout, np.stack([v.data for _, v in items]))

    def __len__(self) -> int:
        return len(self.objectives)

    def column(self, objective: ObjectiveId) -> ParamVector:
        return ParamVector(self.layout, self.array[self.objectives.index(objective)])

    def columns(self) -> list[ParamVector]:
        return [ParamVector(self.layout, row) for row in self.array]

    def select(self, objectives: Sequence[ObjectiveId]) -> "GradientMatrix":
        try:
            rows = [self.objectives.index(o) for o in objectives]
        except ValueError:
            raise StructureError(f"objectives {list(map(str, objectives))} not all present") from None
        return GradientMatrix(objectives, self.layout, self.array[rows])

    def digest(self) -> str:
        h = hashlib.sha256(",".join(map(str, self.objectives)).encode())
        h.update(np.ascontiguousarray(self.array).tobytes())
        return h.hexdigest()


def combine(G: GradientMatrix, weights) -> ParamVector:
    """Weighted sum of the columns of ``G``."""
    w = np.asarray(getattr(weights, "values", weights), dtype=np.float64)
    if w.shape != (len(G),):
        raise StructureError(f"{w.size} weights for {len(G)} columns")
    # fixed left-to-right summation order keeps results bit-reproducible
    out = np.zeros(G.layout.size)
    for wm, row in zip(w, G.array):
        out += wm * row
    return ParamVector(G.layout, out)


def embed(sub: ParamVector, layout: Layout) -> ParamVector:
    """Zero-extend ``sub`` to the (larger) ``layout``."""
    return ParamVector.zeros(layout).replace(sub)
