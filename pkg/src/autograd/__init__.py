"""Autograd package - 4-D tensors, differentiable image kernels and gradient checking"""

from src.autograd.kernels import (
    KERNEL_NAMES,
    add,
    concat_channels,
    conv2d,
    conv_transpose2d,
    inject_adjoint_fault,
    maxpool2x2,
    relu,
    sigmoid,
    upsample_nearest2x,
)
from src.autograd.tensor import (
    CHECK_DTYPE,
    TRAIN_DTYPE,
    BackwardError,
    Param,
    ShapeError,
    Tensor,
    backward,
    backward_many,
)

__all__ = [
    "CHECK_DTYPE",
    "KERNEL_NAMES",
    "TRAIN_DTYPE",
    "BackwardError",
    "Param",
    "ShapeError",
    "Tensor",
    "add",
    "backward",
    "backward_many",
    "concat_channels",
    "conv2d",
    "conv_transpose2d",
    "inject_adjoint_fault",
    "maxpool2x2",
    "relu",
    "sigmoid",
    "upsample_nearest2x",
]
