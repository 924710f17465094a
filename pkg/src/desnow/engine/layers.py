from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor, add, conv2d, leaky_relu

LEAKY_SLOPE = 0.1


class Module:
    """Container with deterministic, name-ordered parameter traversal."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)


class Conv2d(Module):
    """Convolution with circular horizontal / zero vertical padding; fan-in scaled uniform init."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 rng: np.random.Generator | None = None, init_scale: float = 1.0):
        if kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        bound = init_scale * math.sqrt(3.0 / fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_ch, in_ch, kernel, kernel)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride)


class ResidualBlock(Module):
    """``act(x + conv2(act(conv1(x))))``."""

    def __init__(self, channels: int, kernel: int = 3, rng: np.random.Generator | None = None):
        self.conv1 = Conv2d(channels, channels, kernel, rng=rng)
        # small second conv keeps the block near identity at init
        self.conv2 = Conv2d(channels, channels, kernel, rng=rng, init_scale=0.5)

    def forward(self, x: Tensor) -> Tensor:
        h = leaky_relu(self.conv1(x), LEAKY_SLOPE)
        return leaky_relu(add(x, self.conv2(h)), LEAKY_SLOPE)


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class LeakyReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return leaky_relu(x, LEAKY_SLOPE)
