"""Probability simplex: the feasible set for dynamic objective weights."""
from __future__ import annotations

import numpy as np

SUM_TOL = 1e-9


class SimplexWeights:
    """Nonnegative weights summing to one. Read-only."""

    __slots__ = ("values",)

    def __init__(self, values):
        v = np.array(values, dtype=np.float64).reshape(-1)
        if v.size == 0:
            raise ValueError("simplex weights need at least one entry")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError(f"weights must be finite and nonnegative, got {v}")
        if abs(v.sum() - 1.0) > SUM_TOL:
            raise ValueError(f"weights sum to {v.sum()!r}, not 1")
        v.flags.writeable = False
        self.values = v

    def __len__(self) -> int:
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SimplexWeights):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"SimplexWeights({self.values.tolist()})"

    def tolist(self) -> list[float]:
        return self.values.tolist()


def project_array(v: np.ndarray) -> np.ndarray:
    """Sort-and-threshold projection on a plain finite 1-D array.

    Finds the largest k such that the k biggest entries, shifted by a common
    theta, stay positive; everything else is clamped to zero.
    """
    u = np.sort(v, kind="stable")[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def project(v) -> SimplexWeights:
    """Euclidean projection of ``v`` onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("cannot project an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot project a non-finite vector")
    return SimplexWeights(project_array(v))


def uniform(m: int) -> SimplexWeights:
    if m < 1:
        raise ValueError("need at least one weight")
    return SimplexWeights(np.full(m, 1.0 / m))
