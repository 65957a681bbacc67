"""Quasi-likelihood variance-component estimation with POQUIM covariance estimates."""

from .errors import (ConfigError, DataError, EnumerationBudgetError, NumericalError,
                     PoquimError, RankDeficientError)
from .model import (FixedEffects, ModelSpec, VarianceComponents, balanced_one_way,
                    build_covariance, build_projection, gls_beta, indicator,
                    intercept_slope, one_way, residuals, two_way_crossed)
from .likelihood import (FitOptions, FitResult, fit_ml, fit_reml, fit_reml_constrained,
                         ml_expected_hessian, ml_loglik, ml_score, reml_expected_hessian,
                         reml_loglik, reml_score)
from .index_classes import classify_quadruples, classify_triples
from .information import AcmEstimate, QuimDecomposition, acm, poquim_ml, poquim_reml
from .inference import (Hypothesis, TestResult, chi2_upper_tail, dispersion_test,
                        jackknife_oneway_test, poquim_test, student_t_two_sided,
                        twoway_equal_variance_test)
from .simulation import DistributionSpec, StudyConfig, StudyResult, run_study

__version__ = "0.1.0"

__all__ = [
    "AcmEstimate", "ConfigError", "DataError", "DistributionSpec", "EnumerationBudgetError",
    "FitOptions", "FitResult", "FixedEffects", "Hypothesis", "ModelSpec", "NumericalError",
    "PoquimError", "QuimDecomposition", "RankDeficientError", "StudyConfig", "StudyResult",
    "TestResult", "VarianceComponents", "acm", "balanced_one_way", "build_covariance",
    "build_projection", "chi2_upper_tail", "classify_quadruples", "classify_triples",
    "dispersion_test", "fit_ml", "fit_reml", "fit_reml_constrained", "gls_beta", "indicator",
    "intercept_slope", "jackknife_oneway_test", "ml_expected_hessian", "ml_loglik", "ml_score",
    "one_way", "poquim_ml", "poquim_reml", "poquim_test", "reml_expected_hessian",
    "reml_loglik", "reml_score", "residuals", "run_study", "student_t_two_sided",
    "twoway_equal_variance_test",
]
