"""Gaussian-mixture losses for nonlinear least squares."""

from .gmm import GaussianComponent, GaussianMixture
from .loss import (
    DynamicCovarianceScaling,
    GaussianLoss,
    LossEvaluation,
    MaxMixture,
    MaxSumMixture,
    MixtureLossConfig,
    SumMixture,
)
from .solver import LeastSquaresProblem, ResidualBlock, SolverConfig, SolverReport, solve

__version__ = "0.1.0"
