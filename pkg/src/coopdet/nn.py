"""Parameter containers and the handful of layers the model is built from."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for ``seed`` and an optional stream path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Owns parameters as attributes; submodules and lists of submodules nest."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, *,
                 stride: int = 1, dilation: int = 1, bias: bool = True):
        fan_in = c_in * k * k
        self.weight = param(rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, k, k)))
        self.bias = param(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        dilation=self.dilation, padding="same")


class Linear(Module):
    """``x @ W + b`` over the last axis; ``W`` is stored as ``(d_in, d_out)``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, *, bias: bool = True, gain: float = 1.0):
        self.weight = param(rng.normal(0.0, gain / np.sqrt(d_in), (d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor, tag: str | None = None) -> Tensor:
        y = T.matmul(x, self.weight, tag=tag)
        return y + self.bias if self.bias is not None else y


class ChannelNorm(Module):
    def __init__(self, channels: int):
        self.scale = param(np.ones(channels))
        self.shift = param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return T.channel_norm(x, self.scale, self.shift)
