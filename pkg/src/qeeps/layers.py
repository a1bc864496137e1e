"""Parameter-holding layers on top of the tensor ops.

A Module tracks parameters (trainable tensors), buffers (running statistics
and other persistent numpy state) and child modules via attribute scan, so
checkpoint names follow the attribute path, deterministically.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Module:
    """Base class: parameter/buffer discovery, train/eval mode."""

    def __init__(self):
        self.training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield (f"{prefix}{name}", value)
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield (f"{prefix}{name}", value)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int,
                 kernel: int, stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel * kernel
        self.weight = T.parameter(he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.bias = T.parameter(np.zeros(out_ch)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int,
                 zero_init: bool = False):
        super().__init__()
        w = np.zeros((out_dim, in_dim)) if zero_init else he_normal(rng, (out_dim, in_dim), in_dim)
        self.weight = T.parameter(w)
        self.bias = T.parameter(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    """Batch normalization over all axes but the channel axis.

    Running statistics live in numpy buffers; inference uses them frozen.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = T.parameter(np.ones(channels))
        self.beta = T.parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, training=self.training,
                            momentum=self.momentum, eps=self.eps)
