"""Variational inference for Bayesian structured additive distributional
regression: penalized-spline and Markov-random-field predictors for every
parameter of the response distribution, fitted by stochastic gradient ascent
on the ELBO with a factor-covariance Gaussian approximation, exact Gibbs
updates for smoothing variances, likelihood subsampling, global annealing
and robust per-observation re-weighting."""

from .design import (
    DesignBlock,
    TermSpec,
    absorb_constraint,
    build_cyclic_pspline,
    build_intercept,
    build_linear,
    build_mrf,
    build_pspline,
    build_tensor_pspline,
)
from .families import Family, Gamma, Gaussian, NegativeBinomial, get_family
from .model import InverseGamma, SadrModel, ScaleDependentWeibull
from .optimize import (
    AdadeltaState,
    AnnealSchedule,
    FitResult,
    RunOptions,
    StoppingMonitor,
    run,
    subsample,
)
from .robust import BetaHyper, RobustOptions, run_robust
from .va import (
    FactorGaussianVA,
    gibbs_tau,
    grad_estimate,
    hybrid_grad_estimate,
    log_q,
    posterior_sample,
    reparam_sample,
)

__version__ = "0.1.0"

__all__ = [
    "AdadeltaState",
    "AnnealSchedule",
    "BetaHyper",
    "DesignBlock",
    "FactorGaussianVA",
    "Family",
    "FitResult",
    "Gamma",
    "Gaussian",
    "InverseGamma",
    "NegativeBinomial",
    "RobustOptions",
    "RunOptions",
    "SadrModel",
    "ScaleDependentWeibull",
    "StoppingMonitor",
    "TermSpec",
    "absorb_constraint",
    "build_cyclic_pspline",
    "build_intercept",
    "build_linear",
    "build_mrf",
    "build_pspline",
    "build_tensor_pspline",
    "get_family",
    "gibbs_tau",
    "grad_estimate",
    "hybrid_grad_estimate",
    "log_q",
    "posterior_sample",
    "reparam_sample",
    "run",
    "run_robust",
    "subsample",
]
