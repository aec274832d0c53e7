"""Minimal reverse-mode autodiff over float64 numpy arrays."""

from .io import load_tensor, read_tensor, save_tensor, write_tensor
from .ops import (
    DEFAULT_EPS,
    bilinear_resize,
    conv2d,
    gap,
    linear,
    minmax_normalize,
    mul_broadcast,
    relu,
    softmax_cross_entropy,
    sq_l2,
)
from .optim import ParamSet, sgd_step
from .tensor import Function, Tape, Tensor, active_tape, as_tensor, backward, no_tape, stack

__all__ = [
    "DEFAULT_EPS",
    "Function",
    "ParamSet",
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "backward",
    "bilinear_resize",
    "conv2d",
    "gap",
    "linear",
    "load_tensor",
    "minmax_normalize",
    "mul_broadcast",
    "no_tape",
    "read_tensor",
    "relu",
    "save_tensor",
    "sgd_step",
    "softmax_cross_entropy",
    "sq_l2",
    "stack",
    "write_tensor",
]
