"""Parameter learning for discrete Bayesian networks with hidden variables.

Besides exact EM and mean-field EM, the package implements IB-EM: the hidden
variables are treated as a compressed representation of the instance
identity, and the compression/likelihood tradeoff gamma is followed from 0
(trivial solution) to 1 (EM) by continuation.
"""

from .continuation import ContinuationConfig, run_continuation
from .data import Dataset, PriorSpec, load_csv, write_csv
from .em import FitResult, random_restarts, run_em, run_mean_field_em
from .ibem import Problem, TradeoffState, solve_at_gamma
from .inference import log_marginal, log_marginals
from .model import (
    Model,
    NetworkStructure,
    VariableSpec,
    build_model,
    hierarchy,
    naive_bayes,
    random_model,
    sample_dataset,
)
from .selection import CvCurve, cross_validate_gamma, final_fit

__all__ = [
    "ContinuationConfig", "CvCurve", "Dataset", "FitResult", "Model", "NetworkStructure",
    "PriorSpec", "Problem", "TradeoffState", "VariableSpec", "build_model",
    "cross_validate_gamma", "final_fit", "hierarchy", "load_csv", "log_marginal",
    "log_marginals", "naive_bayes", "random_model", "random_restarts", "run_continuation",
    "run_em", "run_mean_field_em", "sample_dataset", "solve_at_gamma", "write_csv",
]
