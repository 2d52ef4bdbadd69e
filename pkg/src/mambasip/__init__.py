"""Speech-intelligibility prediction with selective state-space temporal blocks, on precomputed encoder-layer features."""

from .model import ModelConfig, count_params, init_params, predict_binaural, predict_mono
from .training import TrainConfig, train

__all__ = ["ModelConfig", "TrainConfig", "count_params", "init_params", "predict_mono", "predict_binaural", "train"]
__version__ = "0.1.0"
