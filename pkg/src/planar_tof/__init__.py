"""Planar-surface deviation detection from multi-pixel transient histograms."""

__version__ = "0.1.0"

from .core import (Frame, Label, PreprocessConfig, ProcessedFeature, estimate_ambient,
                   feature_matrix, preprocess, read_dataset, write_dataset)
from .mixture import (FitConfig, SurfaceModel, classify, fit_em, load_model, save_model,
                      score, score_many, select_components)
from .baselines import extract_peak, onboard_feature, peaks_feature
from .simulator import AlbedoMap, AlbedoPatch, Box, Cliff, SceneSpec, SensorSpec, render_frame
from .experiments import generate_experiment
from .evaluation import EvalConfig, compute_roc, run_protocol, threshold_at_fpr

__all__ = [
    "Frame", "Label", "PreprocessConfig", "ProcessedFeature", "estimate_ambient",
    "feature_matrix", "preprocess", "read_dataset", "write_dataset",
    "FitConfig", "SurfaceModel", "classify", "fit_em", "load_model", "save_model", "score",
    "score_many", "select_components",
    "extract_peak", "onboard_feature", "peaks_feature",
    "AlbedoMap", "AlbedoPatch", "Box", "Cliff", "SceneSpec", "SensorSpec", "render_frame",
    "generate_experiment",
    "EvalConfig", "compute_roc", "run_protocol", "threshold_at_fpr",
]
