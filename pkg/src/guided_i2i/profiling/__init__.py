"""Feature extraction, evaluation metrics and active-subset selection."""

from .clustering import (
    ACTIVE,
    INACTIVE,
    PARTIAL,
    dmso_scores,
    kmeans_1d_dp,
    pca_project,
    select_active_subset,
    within_ss,
)
from .evaluation import active_wells, evaluate_wells, minmax_unit, paired_groups, plate_activity
from .features import extract_features, feature_names, feature_table, normalize_features, select_features
from .metrics import (
    CSV_COLUMNS,
    MetricReport,
    cosine_distance_matrix,
    cpcor,
    cpcor_detail,
    frechet_distance,
    image_metrics,
    mtdist,
    nn_match,
    pearson,
    ssim,
)
from .table import FeatureTable

__all__ = [
    "ACTIVE",
    "CSV_COLUMNS",
    "FeatureTable",
    "INACTIVE",
    "MetricReport",
    "PARTIAL",
    "active_wells",
    "evaluate_wells",
    "minmax_unit",
    "paired_groups",
    "plate_activity",
    "cosine_distance_matrix",
    "cpcor",
    "cpcor_detail",
    "dmso_scores",
    "extract_features",
    "feature_names",
    "feature_table",
    "frechet_distance",
    "image_metrics",
    "kmeans_1d_dp",
    "mtdist",
    "nn_match",
    "normalize_features",
    "pca_project",
    "pearson",
    "select_active_subset",
    "select_features",
    "ssim",
    "within_ss",
]
