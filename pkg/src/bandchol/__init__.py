"""Precision matrix estimation for variables with a natural ordering.

Estimators exploit decay of the regression coefficients in the modified
Cholesky factorization: a local cropping estimator for operator-norm loss,
a block-thresholding regression estimator for Frobenius loss, a data-driven
bandwidth search, rank-based variants for monotone-transformed data and a
seeded simulation lab.
"""
from .matcore import (
    CholeskyModel,
    band,
    crop,
    expand,
    modified_cholesky,
    population_regression,
    project_spectrum,
    recompose,
    taper_decomposition,
    taper_target,
)
from .cropping import CropConfig, CropPath, bandwidth_rule, crop_estimate, local_cov, local_prec
from .cholreg import ThresholdConfig, banding_estimate, frob_estimate
from .adaptive import LepskiConfig, adaptive_estimate, lepski_select
from .rankcov import kendall_matrix, rank_crop_estimate, rescale_to_diagonal, spearman_matrix

__version__ = "0.1.0"

__all__ = [
    "CholeskyModel", "band", "crop", "expand", "modified_cholesky", "population_regression",
    "project_spectrum", "recompose", "taper_decomposition", "taper_target",
    "CropConfig", "CropPath", "bandwidth_rule", "crop_estimate", "local_cov", "local_prec",
    "ThresholdConfig", "banding_estimate", "frob_estimate",
    "LepskiConfig", "adaptive_estimate", "lepski_select",
    "kendall_matrix", "rank_crop_estimate", "rescale_to_diagonal", "spearman_matrix",
]
