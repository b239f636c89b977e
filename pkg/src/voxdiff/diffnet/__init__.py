"""Differentiable-network core: fixed 3D nets, hand-derived gradients, Adam."""

from .checkpoint import CheckpointError, load_network, save_network
from .layers import Param, sinusoidal_time_embedding
from .network import (
    Classifier3D,
    Decoder3D,
    Encoder3D,
    Network,
    TensorGrid,
    TrainConfig,
    UNet3D,
    adam_step,
    backward,
    finite_difference_check,
    forward,
)

__all__ = [
    "CheckpointError",
    "Classifier3D",
    "Decoder3D",
    "Encoder3D",
    "Network",
    "Param",
    "TensorGrid",
    "TrainConfig",
    "UNet3D",
    "adam_step",
    "backward",
    "finite_difference_check",
    "forward",
    "load_network",
    "save_network",
    "sinusoidal_time_embedding",
]
