"""Minimal reverse-mode autodiff for the convolutional autoencoder."""
from .ops import (
    BatchNormStats,
    add,
    avg_pool2d,
    batch_norm2d,
    clamp,
    conv2d,
    leaky_relu,
    mse_loss,
    scale,
    tensor_sum,
    upsample_nearest2d,
)
from .optim import AdamState, adam_step, zero_grad
from .serialize import (
    IncompatibleWeightsError,
    ModelWeights,
    WeightFormatError,
    load_weights,
    save_weights,
)
from .tensor import GradientError, ShapeError, Tensor, backward, no_grad

__all__ = [
    "AdamState", "BatchNormStats", "GradientError", "IncompatibleWeightsError",
    "ModelWeights", "ShapeError", "Tensor", "WeightFormatError", "adam_step", "add",
    "avg_pool2d", "backward", "batch_norm2d", "clamp", "conv2d", "leaky_relu", "load_weights",
    "mse_loss", "no_grad", "save_weights", "scale", "tensor_sum", "upsample_nearest2d",
    "zero_grad",
]
