"""Deviation-optimal model averaging: BMAX, Q-aggregation and greedy solvers."""

from .core import (
    AggregationParams,
    DataError,
    Dictionary,
    Entropy,
    Observation,
    SimplexWeights,
    kl_divergence,
    load_csv,
    mix,
    mse,
    regret,
    rho_entropy,
)
from .objectives import (
    CurvatureConstants,
    Evaluator,
    curvature,
    grad_log_j,
    log_j,
    q_objective,
    s_objective,
    t_objective,
)

__version__ = "0.1.0"
