"""Parameters, a tiny module system and the standard layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that training updates.

    ``init`` records how it was initialised: ``("zero",)``,
    ``("uniform", a, b)`` or ``("he-normal", fan_in)``.
    """

    __slots__ = ("init",)

    def __init__(self, data, name: str | None = None, init: tuple = ("zero",)):
        super().__init__(data, requires_grad=True, name=name)
        self.init = init


def init_array(spec: tuple, shape: tuple, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    kind = spec[0]
    if kind == "zero":
        return np.zeros(shape, dtype=dtype)
    if kind == "uniform":
        return rng.uniform(spec[1], spec[2], size=shape).astype(dtype)
    if kind == "he-normal":
        return (rng.standard_normal(shape) * np.sqrt(2.0 / spec[1])).astype(dtype)
    raise ValueError(f"unknown init {spec!r}")


def make_param(shape: tuple, spec: tuple, rng: np.random.Generator, dtype=np.float64) -> Parameter:
    return Parameter(init_array(spec, shape, rng, dtype), init=spec)


class Module:
    """Container whose attributes may be Parameters, Modules, or lists of them."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            yield from _walk(val, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(val, name: str):
    if isinstance(val, Parameter):
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(val, dict):
        for k, item in val.items():
            yield from _walk(item, f"{name}.{k}")


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, *,
                 stride: int = 1, dilation: int = 1, padding: int | None = None,
                 bias: bool = True, zero: bool = False, dtype=np.float64):
        spec = ("zero",) if zero else ("he-normal", c_in * k * k)
        self.w = make_param((c_out, c_in, k, k), spec, rng, dtype)
        self.b = make_param((c_out,), ("zero",), rng, dtype) if bias else None
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k // 2) if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, self.stride, self.dilation, self.padding)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, *,
                 zero: bool = False, dtype=np.float64):
        spec = ("zero",) if zero else ("he-normal", c_in * k)
        self.w = make_param((c_out, c_in, k), spec, rng, dtype)
        self.b = make_param((c_out,), ("zero",), rng, dtype)
        self.padding = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.w, self.b, padding=self.padding)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, *,
                 zero: bool = False, dtype=np.float64):
        spec = ("zero",) if zero else ("he-normal", d_in)
        self.w = make_param((d_out, d_in), spec, rng, dtype)
        self.b = make_param((d_out,), ("zero",), rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)
