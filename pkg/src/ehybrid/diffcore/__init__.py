"""Rank-4 tensor engine with reverse-mode differentiation."""

from . import ops
from .checkpoint import load_checkpoint, restore, save_checkpoint
from .layers import (BatchNorm2d, Conv2d, DepthwiseConv2d, Linear, Module, ParamStore,
                     SqueezeExcite, init_parameters)
from .tensor import GradTape, Tensor, active_tape, backward

__all__ = [
    "ops", "Tensor", "GradTape", "active_tape", "backward", "Module", "ParamStore",
    "Conv2d", "DepthwiseConv2d", "BatchNorm2d", "SqueezeExcite", "Linear",
    "init_parameters", "save_checkpoint", "load_checkpoint", "restore",
]
