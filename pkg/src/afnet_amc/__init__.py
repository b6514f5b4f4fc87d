"""Adaptive-fusion CNN for modulation classification with confidence-weighted two-stage training."""

from .model import ModelConfig, afnet_forward, init_params, load_checkpoint, predict, save_checkpoint
from .signals import DatasetManifest, FrameSet, Modulation, generate_dataset, read_dataset, split_dataset, write_dataset
from .training import TrainConfig, WeightTable, two_stage_train

__version__ = "0.1.0"
