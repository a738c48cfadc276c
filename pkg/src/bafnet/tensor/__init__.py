"""Float32 tensors with reverse-mode autodiff and the operators the networks need."""

from . import nn, ops, spectral
from .core import GradError, ShapeError, Tensor, as_tensor, backward, is_grad_enabled, no_grad
from .gradcheck import gradcheck, numerical_grad
from .module import Module
from .nn import ConfigError
from .serialize import WeightsFormatError

__all__ = [
    "ConfigError",
    "GradError",
    "Module",
    "ShapeError",
    "Tensor",
    "WeightsFormatError",
    "as_tensor",
    "backward",
    "gradcheck",
    "is_grad_enabled",
    "nn",
    "no_grad",
    "numerical_grad",
    "ops",
    "spectral",
]
