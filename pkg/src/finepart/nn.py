"""Small layer helpers on top of :mod:`finepart.tensor`."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Linear:
    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 2.0):
        # He-style init; biases start at zero
        w = rng.standard_normal((n_in, n_out)) * np.sqrt(gain / n_in)
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros((1, n_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class MLP:
    """Stack of Linear layers with ReLU between them (and after the last one if ``final_relu``)."""

    def __init__(self, name: str, dims: Sequence[int], rng: np.random.Generator, final_relu: bool = True):
        self.dims = tuple(dims)
        self.layers = [Linear(f"{name}.{i}", dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]
        self.final_relu = final_relu

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_relu:
                x = T.relu(x)
        return x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


def load_into(params: Sequence[Parameter], arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into parameters, checking names and shapes."""
    names = [p.name for p in params]
    if sorted(names) != sorted(arrays):
        missing = sorted(set(names) - set(arrays))
        extra = sorted(set(arrays) - set(names))
        raise T.TensorError(f"checkpoint mismatch: missing={missing[:3]} unexpected={extra[:3]}")
    for p in params:
        arr = arrays[p.name]
        if arr.shape != p.data.shape:
            raise T.TensorError(f"checkpoint mismatch for {p.name}: {arr.shape} vs {p.data.shape}")
        p.data[...] = arr
        p.m[...] = 0.0
        p.v[...] = 0.0
