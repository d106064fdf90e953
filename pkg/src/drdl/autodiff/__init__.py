"""Minimal reverse-mode autodiff: tensors, layers, Adam, gradient checking, checkpoints."""
from . import tensor as ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, NonFiniteLossError, grad_check
from .nn import BatchNorm, Conv2d, ConvBlock, Linear, ParamModule
from .optim import Adam, ConfigError
from .tensor import ShapeError, Tensor

__all__ = [
    "Adam",
    "BatchNorm",
    "CheckpointError",
    "ConfigError",
    "Conv2d",
    "ConvBlock",
    "GradCheckReport",
    "Linear",
    "NonFiniteLossError",
    "ParamModule",
    "ShapeError",
    "Tensor",
    "grad_check",
    "load_checkpoint",
    "ops",
    "save_checkpoint",
]
