"""Randomized Euler schemes for ODEs and their convergence diagnostics.

The library generates Euler paths driven by unbiased randomized evaluations
of the right-hand side, measures their sup-norm distance to a high-accuracy
reference solution, and verifies the three asymptotic guarantees of the
scheme empirically: the square-root mean-square rate, pathwise decay along
summable mesh sequences, and the Gaussian limit of the rescaled endpoint
error with covariance built from the discrete matrix propagator.
"""

__version__ = "0.1.0"

from .errors import (
    AccuracyError,
    CapabilityError,
    ConfigError,
    DivergenceError,
    DomainError,
    ResourceLimitError,
    StochEulerError,
)
from .fields import (
    RngStream,
    StochasticEstimator,
    VectorField,
    additive_noise_estimator,
    estimate_bias,
    subsample_estimator,
)
from .grid import Partition, dyadic_partition, mesh, uniform_partition
from .models import ModelSpec, model_linear, model_logistic, model_subsampled_sum
from .propagator import (
    CovarianceCurve,
    PropagatorGrid,
    build_propagator_grid,
    covariance_curve,
    discrete_propagator,
    gamma,
    limit_propagator,
    propagator_ode,
    sigma,
)
from .reference import ReferenceSolution, solve_reference, sup_error
from .scheme import StepPath, deterministic_euler, path_eval, path_eval_many, path_to_csv, run_scheme
from .stats import (
    EnsembleResult,
    NormalityReport,
    RateFit,
    as_trace,
    fit_rate,
    gronwall_bound,
    ks_distance,
    normal_cdf,
    normality_report,
    rms_sup_error,
    run_ensemble,
)

__all__ = [
    "__version__",
    "AccuracyError",
    "CapabilityError",
    "ConfigError",
    "DivergenceError",
    "DomainError",
    "ResourceLimitError",
    "StochEulerError",
    "RngStream",
    "StochasticEstimator",
    "VectorField",
    "additive_noise_estimator",
    "estimate_bias",
    "subsample_estimator",
    "Partition",
    "dyadic_partition",
    "mesh",
    "uniform_partition",
    "ModelSpec",
    "model_linear",
    "model_logistic",
    "model_subsampled_sum",
    "CovarianceCurve",
    "PropagatorGrid",
    "build_propagator_grid",
    "covariance_curve",
    "discrete_propagator",
    "gamma",
    "limit_propagator",
    "propagator_ode",
    "sigma",
    "ReferenceSolution",
    "solve_reference",
    "sup_error",
    "StepPath",
    "deterministic_euler",
    "path_eval",
    "path_eval_many",
    "path_to_csv",
    "run_scheme",
    "EnsembleResult",
    "NormalityReport",
    "RateFit",
    "as_trace",
    "fit_rate",
    "gronwall_bound",
    "ks_distance",
    "normal_cdf",
    "normality_report",
    "rms_sup_error",
    "run_ensemble",
]
