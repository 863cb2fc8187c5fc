"""Decentralized parallel SGD: mixing-matrix analysis, training strategies and a cluster timing model."""

from .chronos import ClusterProfile, coupled_run, simulate_wallclock, slowdown_experiment
from .engine import D1D, FM, GENERIC, RM, SDPSGD, LrSchedule, RunRecord, StrategyConfig, run_training
from .mixing import (
    build_fixed_ring,
    build_random_ring,
    build_uniform,
    fm_lambda_closed_form,
    random_permutation,
    second_eigenvalue_magnitude,
)
from .objectives import make_logistic, make_mlp, make_quadratic

__version__ = "0.1.0"

__all__ = [
    "ClusterProfile",
    "D1D",
    "FM",
    "GENERIC",
    "LrSchedule",
    "RM",
    "RunRecord",
    "SDPSGD",
    "StrategyConfig",
    "build_fixed_ring",
    "build_random_ring",
    "build_uniform",
    "coupled_run",
    "fm_lambda_closed_form",
    "make_logistic",
    "make_mlp",
    "make_quadratic",
    "random_permutation",
    "run_training",
    "second_eigenvalue_magnitude",
    "simulate_wallclock",
    "slowdown_experiment",
]
