"""Lasso-based treatment-effect inference under under-selection.

Simulation designs, a weighted Lasso solver, regularization rules,
post double Lasso / debiased Lasso / OLS estimators, omitted-variable-bias
bounds and a deterministic Monte Carlo engine.
"""

__version__ = "0.1.0"

from .estimators import (
    confidence_interval,
    debiased_lasso,
    ols_fit,
    oracle_estimator,
    post_double_lasso,
)
from .lasso import LassoFit, LassoProblem, kkt_residuals, solve_lasso
from .model_core import Dataset, DgpSpec, RngStream, demean, dgp_registry_lookup, generate_dataset
from .ovb_theory import OvbInputs, ovb_lower_bound, under_selection_certificate
from .reg_rules import RegularizationChoice, lambda_bcch, lambda_bickel, resolve_rule

__all__ = [
    "Dataset",
    "DgpSpec",
    "LassoFit",
    "LassoProblem",
    "OvbInputs",
    "RegularizationChoice",
    "RngStream",
    "confidence_interval",
    "debiased_lasso",
    "demean",
    "dgp_registry_lookup",
    "generate_dataset",
    "kkt_residuals",
    "lambda_bcch",
    "lambda_bickel",
    "ols_fit",
    "oracle_estimator",
    "ovb_lower_bound",
    "post_double_lasso",
    "resolve_rule",
    "solve_lasso",
    "under_selection_certificate",
]
