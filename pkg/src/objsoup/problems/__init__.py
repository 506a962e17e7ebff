from .base import (
    FULL_LABELED,
    FULL_UNLABELED,
    ObjectiveEval,
    Problem,
    ProblemSpec,
    SampleBatch,
    finite_diff_gradient,
    gradient_errors,
    hull_distance,
    pareto_distance,
    sample_batches,
)
from .quadratic import ConflictByConstruction, QuadraticSoup, conflict_by_construction, quadratic_soup
from .toynet import ToyMultitaskNet, toy_multitask_net

BUILDERS = {
    "quadratic_soup": quadratic_soup,
    "toy_multitask_net": toy_multitask_net,
    "conflict_by_construction": conflict_by_construction,
}


def build_problem(name: str, params: dict | None = None) -> Problem:
    try:
        builder = BUILDERS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(BUILDERS)}") from None
    return builder(**(params or {}))


__all__ = [
    "BUILDERS",
    "ConflictByConstruction",
    "FULL_LABELED",
    "FULL_UNLABELED",
    "ObjectiveEval",
    "Problem",
    "ProblemSpec",
    "QuadraticSoup",
    "SampleBatch",
    "ToyMultitaskNet",
    "build_problem",
    "conflict_by_construction",
    "finite_diff_gradient",
    "gradient_errors",
    "hull_distance",
    "pareto_distance",
    "quadratic_soup",
    "sample_batches",
    "toy_multitask_net",
]
