"""Parameterised layers on top of :mod:`awm.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from awm import tensor as T
from awm.tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor tagged with the component it belongs to."""

    __slots__ = ("group",)

    def __init__(self, data, group: str = "backbone"):
        super().__init__(data, requires_grad=True)
        self.group = group


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Layer:
    """Minimal container protocol: named parameters and named buffers."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Layer):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, Layer):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self) -> Iterator["Layer"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Layer):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Layer):
                        yield from item.modules()


class Conv2d(Layer):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None, group="backbone"):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(he_normal(rng, (cout, cin, k, k), cin * k * k), group)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm2d(Layer):
    def __init__(self, c, group="backbone"):
        self.gamma = Parameter(np.ones(c), group)
        self.beta = Parameter(np.zeros(c), group)
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)
        self.training = True

    def named_buffers(self, prefix=""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training
        )


class Linear(Layer):
    def __init__(self, din, dout, rng, group="backbone"):
        self.weight = Parameter(he_normal(rng, (dout, din), din), group)
        self.bias = Parameter(np.zeros(dout), group)

    def __call__(self, x: Tensor) -> Tensor:
        return T.fully_connected(x, self.weight, self.bias)
