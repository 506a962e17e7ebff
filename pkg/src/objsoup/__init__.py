"""Multi-objective training recipes with stochastic dynamic weighting."""
from .conflict import ConflictReport, GradientAccumulator, cosine, detect_conflicting_layers, pairwise_matrix
from .param_space import (
    UNSUP,
    Backbone,
    GradientMatrix,
    Head,
    Layout,
    NumericalFailure,
    ParamVector,
    StructureError,
    Supervised,
    Unsupervised,
    axpy,
    combine,
    inner,
)
from .recipes import Budget, ConfigError, PenaltySchedule, RecipeConfig, RunTrace, TrainingAborted, penalty_value, train
from .simplex import SimplexWeights, project, uniform
from .weighting import (
    WeightState,
    ca_direction,
    min_norm_weights,
    modo_step,
    stationarity_measure,
)

__version__ = "0.1.0"
