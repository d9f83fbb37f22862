"""Covariate-adaptive randomization inference for matched observational studies."""

from carinf.core import (
    BalanceTable,
    MatchedDesign,
    Sample,
    TestResult,
    read_sample_csv,
    standardized_differences,
    validate_design,
)
from carinf.inference import (
    EstimationResult,
    diff_in_means,
    exact_test,
    hodges_lehmann,
    mc_test,
    normal_test,
    null_moments,
    regression_adjust,
    tv_diagnostic,
)
from carinf.matching import DistanceSpec, match_optimal, robust_mahalanobis
from carinf.propensity import PropensityFit, fit_logistic, kl_divergence_bound, within_set_probs
from carinf.sensitivity import (
    SensitivityProblem,
    brute_force_bound,
    stratum_bounds,
    threshold_gamma,
    worst_case_pvalue,
)

__version__ = "0.1.0"

__all__ = [
    "BalanceTable", "DistanceSpec", "EstimationResult", "MatchedDesign", "PropensityFit",
    "Sample", "SensitivityProblem", "TestResult", "brute_force_bound", "diff_in_means",
    "exact_test", "fit_logistic", "hodges_lehmann", "kl_divergence_bound", "match_optimal",
    "mc_test", "normal_test", "null_moments", "read_sample_csv", "regression_adjust",
    "robust_mahalanobis", "standardized_differences", "stratum_bounds", "threshold_gamma",
    "tv_diagnostic", "validate_design", "within_set_probs", "worst_case_pvalue",
]
