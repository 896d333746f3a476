from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered registry of named learnable arrays."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, shape: tuple, init: str = "normal", scale: float = 1.0) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "normal":
            fan_in = shape[0] if len(shape) > 1 else 1
            data = self.rng.standard_normal(shape) * (scale / math.sqrt(fan_in))
        else:
            raise ValueError(init)
        t = Tensor(data, requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis for inputs of any rank."""
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x
    out = flat @ w
    if b is not None:
        out = out + b
    return out.reshape(lead + (w.shape[-1],)) if x.ndim != 2 else out
