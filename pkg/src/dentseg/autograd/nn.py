"""Parameterised layers built on :mod:`functional`."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    training = True

    def children(self):
        for v in vars(self).values():
            if isinstance(v, Module):
                yield v
            elif isinstance(v, (list, tuple)):
                yield from (m for m in v if isinstance(m, Module))

    def named_parameters(self, prefix: str = ""):
        for k, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + k, v
            elif isinstance(v, Module):
                yield from v.named_parameters(f"{prefix}{k}.")
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{k}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for k, v in vars(self).items():
            if isinstance(v, Module):
                yield from v.named_buffers(f"{prefix}{k}.")
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield from m.named_buffers(f"{prefix}{k}.{i}.")
        for k in getattr(self, "_buffers", ()):
            yield prefix + k, getattr(self, k)

    def train(self, mode: bool = True):
        self.training = mode
        for c in self.children():
            c.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args):
        return self.forward(*args)


def _param(a: np.ndarray, name: str) -> Tensor:
    return Tensor(a.astype(np.float32), requires_grad=True, name=name)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int = 1,
                 rng: np.random.Generator | None = None, init_std: float | None = None):
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / (cin * kernel * kernel)) if init_std is None else init_std
        self.weight = _param(rng.normal(0.0, std, (cout, cin, kernel, kernel)), "weight")
        self.bias = _param(np.zeros(cout), "bias")
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 2, padding: int = 1,
                 output_padding: int = 1, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        # fan-in of each output pixel is about cin * k * k / stride^2
        std = np.sqrt(2.0 * stride * stride / (cin * kernel * kernel))
        self.weight = _param(rng.normal(0.0, std, (cin, cout, kernel, kernel)), "weight")
        self.bias = _param(np.zeros(cout), "bias")
        self.stride, self.padding, self.output_padding = stride, padding, output_padding

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding,
                                  self.output_padding)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = _param(np.ones(channels), "weight")
        self.bias = _param(np.zeros(channels), "bias")
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class ConvBNReLU(Module):
    """Convolution (or transposed convolution) followed by BN and ReLU."""

    def __init__(self, conv: Module, channels: int):
        self.conv = conv
        self.bn = BatchNorm2d(channels)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))
