"""Numpy-only convolutional network for seven-class facial expression recognition."""

from .labels import LABELS
from .layers import Mode
from .model import ArchConfig, FerModel, build_model, load_checkpoint, predict, save_checkpoint

__all__ = [
    "LABELS", "Mode", "ArchConfig", "FerModel", "build_model", "load_checkpoint",
    "predict", "save_checkpoint",
]
__version__ = "0.1.0"
