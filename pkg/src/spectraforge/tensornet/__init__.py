"""Minimal reverse-mode autodiff, losses and the reconstruction network."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .losses import (
    MAIN_WEIGHTS,
    PRETRAIN_WEIGHTS,
    LossError,
    LossWeights,
    composite_loss,
    loss_delta_bands,
    loss_delta_pixel,
    loss_mae,
    loss_mse,
    loss_smooth_l1,
)
from .network import AsymmetricUNet, ConfigError, NetworkConfig, build_network
from .optim import Adam, AdamState, adam_step
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    bilinear_resize,
    concat_channels,
    conv2d,
    leaky_relu,
    maxpool2,
    no_grad,
    sigmoid,
)

__all__ = [
    "Adam", "AdamState", "AsymmetricUNet", "Checkpoint", "CheckpointError", "ConfigError",
    "LossError", "LossWeights", "MAIN_WEIGHTS", "NetworkConfig", "NonFiniteError",
    "PRETRAIN_WEIGHTS", "ShapeError", "Tensor", "adam_step", "bilinear_resize",
    "build_network", "composite_loss", "concat_channels", "conv2d", "leaky_relu",
    "load_checkpoint", "loss_delta_bands", "loss_delta_pixel", "loss_mae", "loss_mse",
    "loss_smooth_l1", "maxpool2", "no_grad", "save_checkpoint", "sigmoid",
]
