"""Parameter bundles shared by the attention modules and the network."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import RunningStats, Tensor, batchnorm2d, conv2d, relu


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class Conv2dParams:
    weight: Tensor
    bias: Tensor

    @staticmethod
    def create(rng, in_ch: int, out_ch: int, kernel: int, dtype) -> "Conv2dParams":
        w = he_normal(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, dtype)
        return Conv2dParams(Tensor(w, requires_grad=True),
                            Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True))

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def apply(self, x, stride: int = 1, padding: int | None = None):
        pad = self.kernel // 2 if padding is None else padding
        return conv2d(x, self.weight, self.bias, stride=stride, padding=pad)

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class LinearParams:
    weight: Tensor  # (in_dim, out_dim)
    bias: Tensor

    @staticmethod
    def create(rng, in_dim: int, out_dim: int, dtype) -> "LinearParams":
        w = he_normal(rng, (in_dim, out_dim), in_dim, dtype)
        return LinearParams(Tensor(w, requires_grad=True),
                            Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True))

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    state: RunningStats

    @staticmethod
    def create(channels: int, dtype) -> "BatchNormParams":
        return BatchNormParams(Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
                               Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
                               RunningStats.create(channels, dtype=dtype))

    def apply(self, x, training: bool):
        return batchnorm2d(x, self.gamma, self.beta, self.state, training=training)

    def named_params(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.state.mean
        yield f"{prefix}.running_var", self.state.var


class ConvBnRelu:
    """3x3-style conv followed by batch norm and ReLU (the decoder/encoder staple)."""

    def __init__(self, rng, in_ch: int, out_ch: int, kernel: int, dtype):
        self.conv = Conv2dParams.create(rng, in_ch, out_ch, kernel, dtype)
        self.bn = BatchNormParams.create(out_ch, dtype)

    def forward(self, x, training: bool):
        return relu(self.bn.apply(self.conv.apply(x), training))

    def named_params(self, prefix: str):
        yield from self.conv.named_params(f"{prefix}.conv")
        yield from self.bn.named_params(f"{prefix}.bn")

    def named_buffers(self, prefix: str):
        yield from self.bn.named_buffers(f"{prefix}.bn")
