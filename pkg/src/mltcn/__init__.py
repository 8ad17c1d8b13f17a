"""Mixtures of latent trait models with contaminated-normal latent traits.

Clusters multivariate binary data and flags, within each cluster, the
observations whose latent position is unusually far from the centre.
"""

from .criteria import bic, count_parameters, map_classify
from .ecm import FitConfig, FitResult, fit
from .estimator import MLTCN, check_binary_array
from .exceptions import (EmptyComponent, FitFailed, IoError, MltcnError, NumericalBreakdown,
                         ParameterDomain, ParseError, SelectionFailed, UnsupportedDimension,
                         VersionError)
from .model import (BinaryDataset, LatentAssignment, MltcnParams, design_params, sample_mltcn,
                    true_log_likelihood_oracle)
from .selection import (EvaluationReport, SelectionGrid, adjusted_rand_index, evaluation_report,
                        grid_select, median_profiles, rand_index)

__version__ = "0.1.0"

__all__ = [
    "BinaryDataset", "EmptyComponent", "EvaluationReport", "FitConfig", "FitFailed", "FitResult",
    "IoError", "LatentAssignment", "MLTCN", "MltcnError", "MltcnParams", "NumericalBreakdown",
    "ParameterDomain", "ParseError", "SelectionFailed", "SelectionGrid", "UnsupportedDimension",
    "VersionError", "adjusted_rand_index", "bic", "check_binary_array", "count_parameters",
    "design_params", "evaluation_report", "fit", "grid_select", "map_classify",
    "median_profiles", "rand_index", "sample_mltcn", "true_log_likelihood_oracle",
]
