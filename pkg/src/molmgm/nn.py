"""Minimal module system on top of :mod:`molmgm.autodiff`."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Value


class Parameter(Value):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)


class Module:
    """Parameters and submodules are discovered from instance attributes in
    definition order, giving stable dotted names."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, attr in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(attr, Parameter):
                yield full, attr
            elif isinstance(attr, Module):
                yield from attr.named_parameters(full + ".")
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> "OrderedDict[str, Parameter]":
        return OrderedDict(self.named_parameters())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())

    def load_state_dict(self, state, strict: bool = True) -> None:
        params = self.parameters()
        if strict:
            missing = set(params) - set(state)
            unexpected = set(state) - set(params)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for k, arr in state.items():
            if k not in params:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != params[k].shape:
                raise ValueError(f"shape mismatch for {k}: checkpoint {arr.shape} vs model {params[k].shape}")
            params[k].data = arr.copy()

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, scale: float = 1.0):
        self.weight = Parameter(rng.normal(0.0, scale / np.sqrt(d_in), size=(d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Value:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.scale = Parameter(np.ones(d))
        self.shift = Parameter(np.zeros(d))

    def __call__(self, x) -> Value:
        return ad.layer_norm(x) * self.scale + self.shift


class FeedForward(Module):
    """Two linear maps with SiLU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, out_bias: bool = True):
        self.inner = Linear(d_in, d_hidden, rng)
        self.outer = Linear(d_hidden, d_out, rng, bias=out_bias)

    def __call__(self, x) -> Value:
        return self.outer(ad.silu(self.inner(x)))
