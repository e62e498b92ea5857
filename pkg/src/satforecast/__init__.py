"""Semantic-embedding forecasting with flow-matching generation for
satellite image time series."""

from .config import TrainConfig, load_config, save_config, toy_config
from .data import SequenceSample, generate_synthetic_sequence, load_tile_dataset, split_dataset
from .pipeline import ForecastModel, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ForecastModel",
    "SequenceSample",
    "TrainConfig",
    "generate_synthetic_sequence",
    "load_checkpoint",
    "load_config",
    "load_tile_dataset",
    "save_checkpoint",
    "save_config",
    "split_dataset",
    "toy_config",
    "__version__",
]
