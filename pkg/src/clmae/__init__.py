"""Curriculum-masked autoencoder pretraining on a small numpy autodiff engine."""

from .config import TrainConfig, load_config
from .data import Dataset, gen_synthetic
from .training import RunResult, TrainState, run_training

__all__ = ["Dataset", "RunResult", "TrainConfig", "TrainState", "gen_synthetic", "load_config",
           "run_training"]
__version__ = "0.1.0"
