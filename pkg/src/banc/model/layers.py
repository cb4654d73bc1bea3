"""Convolutional building blocks (all causal along time)."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, ops
from .module import Module, Sequential, ShapeError


def _uniform(rng: np.random.Generator, shape, fan_in: float) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv1d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng, stride: int = 1, dilation: int = 1,
                 causal: bool = True, name: str = "conv"):
        super().__init__()
        self.cin, self.cout, self.kernel, self.stride, self.dilation = cin, cout, kernel, stride, dilation
        self.causal, self.name = causal, name
        self.weight = _uniform(rng, (cout, cin, kernel), cin * kernel)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def zero_(self) -> "Conv1d":
        self.weight.data[...] = 0.0
        self.bias.data[...] = 0.0
        return self

    def _padding(self) -> tuple[int, int]:
        if self.causal:
            return ops.causal_padding(self.kernel, self.stride, self.dilation), 0
        total = self.dilation * (self.kernel - 1)
        return total // 2, total - total // 2

    def __call__(self, x: Tensor) -> Tensor:
        if self.causal:
            return ops.conv1d_causal(x, self.weight, self.bias, self.stride, self.dilation)
        return ops.conv1d(x, self.weight, self.bias, self.stride, self.dilation, self._padding())

    def infer_shape(self, shape):
        b, c, length = shape
        if c != self.cin:
            raise ShapeError(f"{self.name}: expects {self.cin} input channels, got {c}")
        if self.causal and length % self.stride:
            raise ShapeError(f"{self.name}: length {length} not divisible by stride {self.stride}")
        pl, pr = self._padding()
        span = self.dilation * (self.kernel - 1) + 1
        lout = (length + pl + pr - span) // self.stride + 1
        if lout <= 0:
            raise ShapeError(f"{self.name}: length {length} too short for kernel {self.kernel}")
        return b, self.cout, lout


class ConvTranspose1d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int, rng, name: str = "convT"):
        super().__init__()
        self.cin, self.cout, self.kernel, self.stride, self.name = cin, cout, kernel, stride, name
        # each output sample sees cin * kernel / stride inputs
        self.weight = _uniform(rng, (cin, cout, kernel), cin * kernel / stride)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose1d(x, self.weight, self.bias, self.stride)

    def infer_shape(self, shape):
        b, c, length = shape
        if c != self.cin:
            raise ShapeError(f"{self.name}: expects {self.cin} input channels, got {c}")
        return b, self.cout, length * self.stride


class BatchNorm1d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, name: str = "bn"):
        super().__init__()
        self.channels, self.momentum, self.eps, self.name = channels, momentum, eps, name
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm1d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                                self.training, self.momentum, self.eps)

    def infer_shape(self, shape):
        if shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expects {self.channels} channels, got {shape[1]}")
        return shape


class Activation(Module):
    def __init__(self, kind: str):
        super().__init__()
        self.kind = kind

    def __call__(self, x: Tensor) -> Tensor:
        return ops.pointwise(self.kind, x)

    def infer_shape(self, shape):
        return shape


class ResidualUnit(Module):
    """``x + conv1x1(elu(conv_k,dilated(elu(x))))``."""

    def __init__(self, channels: int, dilation: int, kernel: int, rng):
        super().__init__()
        self.conv1 = Conv1d(channels, channels, kernel, rng, dilation=dilation, name=f"ru_d{dilation}.conv1")
        self.conv2 = Conv1d(channels, channels, 1, rng, name=f"ru_d{dilation}.conv2")

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv2(ops.elu(self.conv1(ops.elu(x))))
        return x + y

    def infer_shape(self, shape):
        out = self.conv2.infer_shape(self.conv1.infer_shape(shape))
        if out != tuple(shape):
            raise ShapeError(f"residual unit changes shape {shape} -> {out}")
        return out


class EncoderBlock(Sequential):
    """Residual units with growing dilation, then a strided conv doubling the channels."""

    def __init__(self, channels: int, stride: int, dilations, kernel: int, rng, name: str):
        super().__init__([ResidualUnit(channels, d, kernel, rng) for d in dilations])
        self.append(Activation("elu"))
        self.append(Conv1d(channels, 2 * channels, 2 * stride, rng, stride=stride, name=f"{name}.down"))


class DecoderBlock(Sequential):
    """Transposed conv halving the channels, then residual units."""

    def __init__(self, channels: int, stride: int, dilations, kernel: int, rng, name: str):
        super().__init__([Activation("elu"),
                          ConvTranspose1d(channels, channels // 2, 2 * stride, stride, rng, name=f"{name}.up")])
        for d in dilations:
            self.append(ResidualUnit(channels // 2, d, kernel, rng))
