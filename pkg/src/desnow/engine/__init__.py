"""Minimal float64 reverse-mode engine: tensors, circular-padded convolution, residual blocks, Adam."""
from .layers import Conv2d, LeakyReLU, Module, ResidualBlock, Sequential
from .optim import Adam, adam_step
from .tensor import (
    Tensor,
    absolute,
    add,
    as_tensor,
    channel_min,
    clamp,
    concat,
    conv2d,
    div,
    exp,
    index,
    leaky_relu,
    log,
    log_softmax,
    masked_mean,
    masked_sum,
    mul,
    no_grad,
    sub,
    sum_all,
    where,
)
from .gradcheck import numerical_grad, relative_error

__all__ = [
    "Adam", "Conv2d", "LeakyReLU", "Module", "ResidualBlock", "Sequential", "Tensor",
    "absolute", "adam_step", "add", "as_tensor", "channel_min", "clamp", "concat", "conv2d",
    "div", "exp", "index", "leaky_relu", "log", "log_softmax", "masked_mean", "masked_sum",
    "mul", "no_grad", "numerical_grad", "relative_error", "sub", "sum_all", "where",
]
