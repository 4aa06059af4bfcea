"""Toolkit for estimating optimal multi-stage treatment regimes from
longitudinal observational data and sizing studies that will estimate them.

Core pieces: backward-recursive weighted least squares estimation of
stage-wise decision rules (``dwols``), m-out-of-n bootstrap confidence
regions valid under non-regularity (``confidence``), a projection-interval
test of the optimal regime's value against a comparison mean
(``value_test``), bootstrap-oversampling sample size search (``sizing``),
and a benchmark generative model plus experiment harness (``simgen``).
"""

from .data import Dataset, Schema, StageSpec, Trajectory, history, load_csv, resample, write_csv
from .dwols import DwolsFit, ValueEstimate, fit, fit_propensity, recommend, sandwich_K, value, weights
from .confidence import (
    ConfidenceRegion,
    RegionConfig,
    WaldEllipsoid,
    mn_region,
    nonregularity_p_hat,
    resample_size,
    wald_region_K,
)
from .numerics import (
    RngStream,
    WlsSolution,
    chisq_quantile,
    empirical_quantile,
    fit_logistic,
    normal_quantile,
    solve_wls,
)
from .value_test import SearchConfig, TestResult, projection_test, region_extremum
from .sizing import SizingConfig, SizingResult, opt_quantile_at, pwr_power_at, size_combined, size_for_opt, size_for_pwr
from .simgen import GenModel, Term, generate, paper_model, paper_specs, true_value_of_regime, true_value_optimal

__version__ = "0.1.0"

__all__ = [
    "ConfidenceRegion",
    "Dataset",
    "DwolsFit",
    "GenModel",
    "RegionConfig",
    "RngStream",
    "Schema",
    "SearchConfig",
    "SizingConfig",
    "SizingResult",
    "StageSpec",
    "Term",
    "TestResult",
    "Trajectory",
    "ValueEstimate",
    "WaldEllipsoid",
    "WlsSolution",
    "chisq_quantile",
    "empirical_quantile",
    "fit",
    "fit_logistic",
    "fit_propensity",
    "generate",
    "history",
    "load_csv",
    "mn_region",
    "nonregularity_p_hat",
    "normal_quantile",
    "opt_quantile_at",
    "paper_model",
    "paper_specs",
    "projection_test",
    "pwr_power_at",
    "recommend",
    "region_extremum",
    "resample",
    "resample_size",
    "sandwich_K",
    "size_combined",
    "size_for_opt",
    "size_for_pwr",
    "solve_wls",
    "true_value_of_regime",
    "true_value_optimal",
    "value",
    "wald_region_K",
    "weights",
    "write_csv",
    "__version__",
]
