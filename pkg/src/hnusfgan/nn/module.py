"""Parameter containers and the convolution layers the networks are built from."""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Parameter(Tensor):
    """Trainable tensor carrying its own Adam moments and step count."""

    __slots__ = ("exp_avg", "exp_avg_sq", "step")

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, op="param")
        self.exp_avg = np.zeros_like(self.data)
        self.exp_avg_sq = np.zeros_like(self.data)
        self.step = 0


class Module:
    """Minimal parameter tree; attributes that are Parameters, Modules or lists
    of Modules are discovered in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


@contextlib.contextmanager
def cast_parameters(module: Module, dtype):
    """Temporarily run ``module`` with parameter values cast to ``dtype``."""
    params = module.parameters()
    saved = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(dtype)
        yield module
    finally:
        for p, data in zip(params, saved):
            p.data = data


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 1,
                 rng: np.random.Generator | None = None, dilation: int = 1, stride: int = 1,
                 padding="same", groups: int = 1, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = (in_channels // groups) * kernel_size
        self.weight = Parameter(kaiming_uniform(
            rng, (out_channels, in_channels // groups, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.dilation = dilation
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def forward(self, x):
        return F.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                        dilation=self.dilation, groups=self.groups)


class PDConv1d(Module):
    """Odd-kernel convolution with per-sample dilation supplied at call time."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 rng: np.random.Generator | None = None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(kaiming_uniform(
            rng, (out_channels, in_channels, kernel_size), in_channels * kernel_size))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x, dilations):
        return F.pdconv1d(x, self.weight, self.bias, dilations)
