"""Continual graph factor predictor for multivariate price panels."""

from .estimator import FactorPredictor, load_checkpoint, save_checkpoint
from .network import ArchConfig, SpatioTemporalModel
from .panel import (NormalizationState, PanelPreprocessor, SynthConfig, TimeSeriesPanel,
                    ingest_csv, preprocess, split_panel, synthesize)
from .targets import Segmentation, TaskId, WindowGeometry, gap_target, moving_average, segment_dp
from .trainer import TrainConfig

__all__ = [
    "ArchConfig",
    "FactorPredictor",
    "NormalizationState",
    "PanelPreprocessor",
    "Segmentation",
    "SpatioTemporalModel",
    "SynthConfig",
    "TaskId",
    "TimeSeriesPanel",
    "TrainConfig",
    "WindowGeometry",
    "gap_target",
    "ingest_csv",
    "load_checkpoint",
    "moving_average",
    "preprocess",
    "save_checkpoint",
    "segment_dp",
    "split_panel",
    "synthesize",
]
