"""Small layer objects that own parameters and running buffers."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Layer:
    training = True

    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        pass

    def describe(self) -> str:
        return type(self).__name__


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, kernel: int = 3,
                 padding: int = 1, negative_slope: float = 0.01):
        # Kaiming-uniform weights for leaky ReLU, zero bias
        fan_in = in_ch * kernel * kernel
        gain = math.sqrt(2.0 / (1.0 + negative_slope ** 2))
        bound = gain * math.sqrt(3.0 / fan_in)
        self.in_ch, self.out_ch, self.kernel, self.padding = in_ch, out_ch, kernel, padding
        self.weight = Tensor(rng.uniform(-bound, bound, (out_ch, in_ch, kernel, kernel)),
                             requires_grad=True, dtype=np.float32)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True, dtype=np.float32)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.padding)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def describe(self) -> str:
        return f"conv{self.kernel}({self.in_ch}->{self.out_ch},p{self.padding})"


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.01):
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        return ops.leaky_relu(x, self.slope)

    def describe(self) -> str:
        return f"lrelu({self.slope:g})"


class BatchNorm2d(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=np.float32)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=np.float32)
        self.stats = ops.BatchNormStats(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm2d(x, self.gamma, self.beta, self.stats, self.training,
                                self.momentum, self.eps)

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.stats.mean, "running_var": self.stats.var}

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        self.stats.mean = np.array(values["running_mean"], dtype=np.float32)
        self.stats.var = np.array(values["running_var"], dtype=np.float32)

    def describe(self) -> str:
        return f"bn({self.channels})"


class AvgPool2d(Layer):
    def __call__(self, x: Tensor) -> Tensor:
        return ops.avg_pool2d(x, 2)

    def describe(self) -> str:
        return "avgpool2"


class Upsample2d(Layer):
    def __call__(self, x: Tensor) -> Tensor:
        return ops.upsample_nearest2d(x, 2)

    def describe(self) -> str:
        return "upnearest2"


class Sequential(Layer):
    """Ordered layer stack; parameter names are ``<index>.<name>``."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def __iter__(self) -> Iterator[Layer]:
        return iter(self.layers)

    def set_training(self, flag: bool) -> None:
        for layer in self.layers:
            layer.training = flag

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = OrderedDict()
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters().items():
                out[f"{i}.{name}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = OrderedDict()
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers().items():
                out[f"{i}.{name}"] = b
        return out

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            prefix = f"{i}."
            own = {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}
            if own:
                layer.load_buffers(own)

    def describe(self) -> str:
        return "[" + ",".join(layer.describe() for layer in self.layers) + "]"
