"""Distillation of a step-wise policy into a chunked trajectory generator."""

from .dataset import CollectConfig, Dataset, TrajectorySample, collect_dataset, load_dataset, save_dataset
from .generator import (
    ConfigurationError,
    GeneratorConfig,
    TrajectoryGenerator,
    TrajectoryPrediction,
    integrate_controls,
    load_model,
    pose_loss,
    predict_chunk,
    rollout_autoregressive,
    save_model,
)
from .training import TrainConfig, TrainingError, TrainingReport, evaluate_open_loop, train

__all__ = [
    "CollectConfig",
    "ConfigurationError",
    "Dataset",
    "GeneratorConfig",
    "TrainConfig",
    "TrainingError",
    "TrainingReport",
    "TrajectoryGenerator",
    "TrajectoryPrediction",
    "TrajectorySample",
    "collect_dataset",
    "evaluate_open_loop",
    "integrate_controls",
    "load_dataset",
    "load_model",
    "pose_loss",
    "predict_chunk",
    "rollout_autoregressive",
    "save_dataset",
    "save_model",
    "train",
]
