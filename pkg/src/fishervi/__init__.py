"""Gaussian posterior approximation by score-matching least squares.

Fits full-covariance Gaussian approximations to unnormalized target
densities by minimizing the expected squared difference of score functions,
via a damped iteratively re-weighted least squares solver. Ships reference
baselines (random-walk Metropolis-Hastings, the Jaakkola-Jordan logistic
bound, doubly stochastic variational inference, 1-d KL fitting) and a
benchmark harness for logistic-regression experiments.
"""

from fishervi.gaussian import (
    MomentParam,
    NaturalParam,
    PositiveDefiniteError,
    moment_to_natural,
    natural_to_moment,
)
from fishervi.targets import Dataset, GaussianTarget, LogisticTarget, NormalMixture, SkewNormal, StudentT, TargetModel
from fishervi.solver import FitReport, SolverConfig, fisher_divergence, fit

__all__ = [
    "MomentParam",
    "NaturalParam",
    "PositiveDefiniteError",
    "moment_to_natural",
    "natural_to_moment",
    "Dataset",
    "TargetModel",
    "GaussianTarget",
    "LogisticTarget",
    "StudentT",
    "NormalMixture",
    "SkewNormal",
    "SolverConfig",
    "FitReport",
    "fisher_divergence",
    "fit",
]

__version__ = "0.1.0"
