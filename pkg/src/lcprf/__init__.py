"""Localized conformal prediction intervals with random-forest localizers."""

from .calibration import LcpModel, alpha_tilde, lcp_threshold, lcp_threshold_naive, split_threshold, tc_fit
from .core import DataError, Dataset, DomainError, Interval, StepCdf, merge_duplicates, weighted_quantile
from .estimators import ConformalForestRegressor
from .forest import RandomForest

__version__ = "0.1.0"

__all__ = [
    "ConformalForestRegressor",
    "DataError",
    "Dataset",
    "DomainError",
    "Interval",
    "LcpModel",
    "RandomForest",
    "StepCdf",
    "alpha_tilde",
    "lcp_threshold",
    "lcp_threshold_naive",
    "merge_duplicates",
    "split_threshold",
    "tc_fit",
    "weighted_quantile",
]
