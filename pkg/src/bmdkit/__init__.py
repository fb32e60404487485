"""Benchmark-dose estimation with monotone penalized regression splines.

The pieces, in pipeline order:

* :mod:`bmdkit.splines` — B-spline bases, derivatives, curvature penalties;
* :mod:`bmdkit.model` — the monotone additive model and its marginal-
  likelihood fit;
* :mod:`bmdkit.bmd` — the benchmark-dose root solve on the fitted curve;
* :mod:`bmdkit.bmdl` — lower confidence limits (delta, pivot, bootstrap);
* :mod:`bmdkit.sim` — the coverage and timing study;
* :mod:`bmdkit.cli` — the ``bmdkit`` command.
"""

from .bmd import BmdConfig, BmdEstimate, c_const, estimate_bmd
from .bmdl import (
    BmdlReport,
    CoefCovariance,
    bmdl_report,
    bootstrap_bmdl,
    coef_covariance,
    delta_bmdl,
    pivot_bmdl,
)
from .errors import (
    BmdkitError,
    BmdlNotEstimable,
    BmdNotEstimable,
    ConfigError,
    DataFormatError,
    DegenerateKnots,
    DegenerateSlope,
    FitFailed,
    InnerOptFailed,
    InvalidArgument,
    NoDerivative,
    NoTrueBmd,
    OutOfSupport,
    UnsupportedOrder,
)
from .model import (
    DoseResponseData,
    FitConfig,
    FittedModel,
    ModelParams,
    PosteriorSamples,
    fit,
    posterior_sample,
)
from .sim import SimConfig, SimResultRow, run_study, simulate_dataset, true_bmd
from .splines import (
    KnotVector,
    basis_derivative,
    de_boor,
    derivative_coeffs,
    eval_basis,
    greville_points,
    make_knots,
    penalty_matrix,
)

__version__ = "0.1.0"

__all__ = [
    "BmdConfig",
    "BmdEstimate",
    "BmdkitError",
    "BmdlNotEstimable",
    "BmdlReport",
    "BmdNotEstimable",
    "CoefCovariance",
    "ConfigError",
    "DataFormatError",
    "DegenerateKnots",
    "DegenerateSlope",
    "DoseResponseData",
    "FitConfig",
    "FitFailed",
    "FittedModel",
    "InnerOptFailed",
    "InvalidArgument",
    "KnotVector",
    "ModelParams",
    "NoDerivative",
    "NoTrueBmd",
    "OutOfSupport",
    "PosteriorSamples",
    "SimConfig",
    "SimResultRow",
    "UnsupportedOrder",
    "basis_derivative",
    "bmdl_report",
    "bootstrap_bmdl",
    "c_const",
    "coef_covariance",
    "de_boor",
    "delta_bmdl",
    "derivative_coeffs",
    "estimate_bmd",
    "eval_basis",
    "fit",
    "greville_points",
    "make_knots",
    "penalty_matrix",
    "pivot_bmdl",
    "posterior_sample",
    "run_study",
    "simulate_dataset",
    "true_bmd",
    "__version__",
]
