"""Learned iterative decomposition of non-stationary 1-D signals.

The network peels off one intrinsic mode function (IMF) per stage; each
stage runs ``S`` sifting-like inner steps, each subtracting a learned local
average, and optionally cleans its output with total-variation denoising.
"""

from .estimator import IRCNNDecomposer
from .model import Model, ModelConfig, build_variant, load_model, save_model
from .signal import ComponentSet, MetricReport, Signal, TimeGrid, metrics, total_variation
from .trainer import TrainConfig, evaluate_dataset, grid_search, train
from .tvd import TvdParams, tvd_denoise

__version__ = "0.1.0"

__all__ = [
    "ComponentSet", "IRCNNDecomposer", "MetricReport", "Model", "ModelConfig", "Signal",
    "TimeGrid", "TrainConfig", "TvdParams", "build_variant", "evaluate_dataset",
    "grid_search", "load_model", "metrics", "save_model", "total_variation", "train",
    "tvd_denoise",
]
