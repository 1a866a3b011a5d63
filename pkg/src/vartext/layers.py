"""Minimal parameter containers built on the tensor core."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import RunningStats, Tensor, batchnorm, conv2d, relu


class Module:
    """Tracks child modules and parameters assigned as attributes."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, RunningStats]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, RunningStats):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter and running statistic in place."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, b in self.named_buffers():
            b.mean = b.mean.astype(dtype)
            b.var = b.var.astype(dtype)
        return self


def kaiming(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return Tensor(w, requires_grad=True)


class Conv(Module):
    """Plain convolution with bias (``same`` padding)."""

    def __init__(self, rng, c_in: int, c_out: int, k: int):
        self.weight = kaiming(rng, (c_out, c_in, k, k))
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.padding = k // 2

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        return conv2d(x, self.weight, self.bias, padding=self.padding)


class ConvBNReLU(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int):
        self.weight = kaiming(rng, (c_out, c_in, k, k))
        self.gamma = Tensor(np.ones(c_out), requires_grad=True)
        self.beta = Tensor(np.zeros(c_out), requires_grad=True)
        self.stats = RunningStats(c_out)
        self.padding = k // 2

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        y = conv2d(x, self.weight, None, padding=self.padding)
        y = batchnorm(y, self.gamma, self.beta, mode=mode, running=self.stats)
        return relu(y)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        for layer in self.layers:
            x = layer(x, mode)
        return x
