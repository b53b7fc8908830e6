"""Nonlinear quantile mixed models.

Conditional quantile curves for clustered data, estimated by maximizing a
Laplace approximation to an asymmetric-Laplace likelihood whose check loss is
smoothed and then sharpened over a decreasing sequence of smoothing levels.
"""

from .core import (
    Cluster,
    ClusteredDataset,
    FitResult,
    InvalidParameterError,
    NLQMMError,
    NumericalError,
    VarianceSpec,
    materialize_psi,
)
from .estimator import NLQMMRegressor, NLRQRegressor
from .fitter import FitControl, FitError, fit, nlrq_fit, starting_values
from .inference import BootstrapResult, cluster_bootstrap
from .likelihood import LaplaceLikelihood, laplace_loglik, profiled_loglik
from .loss import kappa, rho
from .model import BUILTINS, DesignMap, ModelSpec, PhiTerm, get_model, identity_design
from .remode import solve_mode, solve_modes
from .simulate import ScenarioSpec, gen_scenario, run_study

__version__ = "0.1.0"

__all__ = [
    "BUILTINS", "BootstrapResult", "Cluster", "ClusteredDataset", "DesignMap", "FitControl",
    "FitError", "FitResult", "InvalidParameterError", "LaplaceLikelihood", "ModelSpec",
    "NLQMMError", "NLQMMRegressor", "NLRQRegressor", "NumericalError", "PhiTerm",
    "ScenarioSpec", "VarianceSpec", "cluster_bootstrap", "fit", "gen_scenario", "get_model",
    "identity_design", "kappa", "laplace_loglik", "materialize_psi", "nlrq_fit",
    "profiled_loglik", "rho", "run_study", "solve_mode", "solve_modes", "starting_values",
]
