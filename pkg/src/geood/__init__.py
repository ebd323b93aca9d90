"""Mahalanobis-family OOD detection, representation geometry and radial l2 normalization."""

from geood.beta_optimizer import (
    BetaRegressor,
    BetaSweepResult,
    LodoRow,
    collinearity_filter,
    lodo_evaluate,
    sweep_beta,
    train_beta_regressor,
)
from geood.detectors import (
    MahalanobisDetector,
    dimension_ablation,
    md_scores,
    mmd_scores,
    per_dimension_separation,
    rmd_scores,
)
from geood.embeddings_io import EmbeddingSet, ExperimentManifest, Role, load_embeddings, load_manifest, split_train
from geood.evaluation import correlate, fpr_at_tpr
from geood.gaussian import GaussianModel, compute_scatter, eigendecompose, fit_gaussian, whitening_transform
from geood.geometry import (
    GeometryReport,
    combined_lid_slope,
    fisher_ratio,
    intrinsic_dimension,
    lid_estimates,
    spectral_shift,
    spectrum_metrics,
)
from geood.radial import BetaMahalanobisDetector, RadialConfig, RadialScaler, fit_beta_pipeline, radial_map, score_beta_pipeline
from geood.synth import SynthConfig, generate, model_family

__version__ = "0.1.0"

__all__ = [
    "BetaMahalanobisDetector",
    "BetaRegressor",
    "BetaSweepResult",
    "EmbeddingSet",
    "ExperimentManifest",
    "GaussianModel",
    "GeometryReport",
    "LodoRow",
    "MahalanobisDetector",
    "RadialConfig",
    "RadialScaler",
    "Role",
    "SynthConfig",
    "collinearity_filter",
    "combined_lid_slope",
    "compute_scatter",
    "correlate",
    "dimension_ablation",
    "eigendecompose",
    "fisher_ratio",
    "fit_beta_pipeline",
    "fit_gaussian",
    "fpr_at_tpr",
    "generate",
    "intrinsic_dimension",
    "lid_estimates",
    "load_embeddings",
    "load_manifest",
    "lodo_evaluate",
    "md_scores",
    "mmd_scores",
    "model_family",
    "per_dimension_separation",
    "radial_map",
    "rmd_scores",
    "score_beta_pipeline",
    "spectral_shift",
    "spectrum_metrics",
    "split_train",
    "sweep_beta",
    "train_beta_regressor",
    "whitening_transform",
]
