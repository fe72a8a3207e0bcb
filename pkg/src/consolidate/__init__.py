"""Continual learning with elastic weight consolidation and its stabilized variant."""

from .consolidation import (
    ConsolidatedState,
    consolidate,
    explosion_demo,
    penalty_gradient,
    penalty_value,
    stabilization_factor,
)
from .estimator import ElasticWeightConsolidation
from .experiments import RunConfig, RunResult, mean_ci, prune_and_eval, run_sequential, sweep_lambda
from .importance import (
    ImportanceMap,
    SIAccumulator,
    accumulate,
    fisher_importance,
    mas_importance,
    total_abs_signal_importance,
)
from .nn import SGD, Adam, Network, clip_global_norm

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ConsolidatedState",
    "ElasticWeightConsolidation",
    "ImportanceMap",
    "Network",
    "RunConfig",
    "RunResult",
    "SGD",
    "SIAccumulator",
    "accumulate",
    "clip_global_norm",
    "consolidate",
    "explosion_demo",
    "fisher_importance",
    "mas_importance",
    "mean_ci",
    "penalty_gradient",
    "penalty_value",
    "prune_and_eval",
    "run_sequential",
    "stabilization_factor",
    "sweep_lambda",
    "total_abs_signal_importance",
]
