"""Numpy tensors with tape-based reverse-mode differentiation."""

from .nn import (
    add,
    batch_norm,
    concat_channels,
    conv3d,
    conv_output_extents,
    crop_center,
    downsample_average,
    dropout,
    max_pool3d,
    softmax_channels,
    upsample,
)
from .optim import OptimizerState, make_optimizer, optimizer_step
from .tensor import Tape, Tensor, as_tensor, backward, exp, log, mean, relu, sigmoid, square, tsum

__all__ = [
    "Tape", "Tensor", "as_tensor", "backward",
    "add", "batch_norm", "concat_channels", "conv3d", "conv_output_extents", "crop_center",
    "downsample_average", "dropout", "exp", "log", "max_pool3d", "mean", "relu", "sigmoid",
    "softmax_channels", "square", "tsum", "upsample",
    "OptimizerState", "make_optimizer", "optimizer_step",
]
