"""Minimal reverse-mode autodiff over numpy arrays."""

from .gradcheck import grad_check
from .ops import (BatchNormState, add, batch_norm, bilstm, concat, conv1d, dropout, maxpool1d,
                  mul, positionwise_norm, relu, selu, sigmoid, softmax, tanh, weight_norm)
from .tensor import Tensor, is_grad_enabled, no_grad

__all__ = [
    "BatchNormState", "Tensor", "add", "batch_norm", "bilstm", "concat", "conv1d", "dropout",
    "grad_check", "is_grad_enabled", "maxpool1d", "mul", "no_grad", "positionwise_norm",
    "relu", "selu", "sigmoid", "softmax", "tanh", "weight_norm",
]
