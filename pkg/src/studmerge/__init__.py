"""Sparse-tube video self-distillation with divergence-guided model merging.

Site models are trained on healthy videos only, merged without a shared base
model, and used for zero-shot anomaly detection by KNN feature distance.
"""

from .divmerge import MergeConfig, geometric_median, merge, model_soup
from .knn import FeatureBank, Metrics, build_bank, knn_score, knn_scores
from .params import ParamMap, load, save
from .pipeline import ExperimentConfig, run_compare
from .synth import SiteProfile, default_profiles, generate_clip, generate_site
from .trainer import TrainConfig, train_site
from .tubes import TubeConfig, TubeSet, tokenize

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "FeatureBank", "MergeConfig", "Metrics", "ParamMap", "SiteProfile",
    "TrainConfig", "TubeConfig", "TubeSet", "build_bank", "default_profiles", "generate_clip",
    "generate_site", "geometric_median", "knn_score", "knn_scores", "load", "merge",
    "model_soup", "run_compare", "save", "tokenize", "train_site",
]
