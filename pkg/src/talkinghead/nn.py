"""Parameter containers and the small set of layers the networks are built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor, get_default_dtype, leaky_relu, relu


class Module:
    """Base class collecting Parameters and sub-Modules by attribute name.

    Parameter paths are dotted attribute chains (``encoder.down.0.weight``),
    so they are stable as long as the construction order is.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> dict[str, Parameter]:
        params = {}
        for name, p in self.named_parameters():
            if name in params:
                raise ValueError(f"duplicate parameter path {name}")
            p.name = name
            params[name] = p
        return params

    def trainable(self) -> dict[str, Parameter]:
        return {k: p for k, p in self.parameters().items() if p.trainable}

    def freeze(self) -> None:
        for p in self.parameters().values():
            p.trainable = False
            p.requires_grad = False

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            if missing:
                raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype).copy()

    def zero_biases(self) -> None:
        """Set every ``bias``-named parameter to zero (used by tests and zero-init heads)."""
        for name, p in self.parameters().items():
            if name.endswith("bias"):
                p.data[...] = 0


def _walk(value, path: str):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 gain: float = np.sqrt(2.0)):
        self.weight = Parameter(_uniform(rng, (n_in, n_out), gain * np.sqrt(3.0 / n_in)))
        self.bias = Parameter(np.zeros(n_out, dtype=get_default_dtype())) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int | None = None, gain: float = np.sqrt(2.0)):
        fan_in = c_in * k * k
        self.weight = Parameter(_uniform(rng, (c_out, c_in, k, k), gain * np.sqrt(3.0 / fan_in)))
        self.bias = Parameter(np.zeros(c_out, dtype=get_default_dtype()))
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int | None = None, gain: float = np.sqrt(2.0)):
        self.weight = Parameter(_uniform(rng, (c_out, c_in, k), gain * np.sqrt(3.0 / (c_in * k))))
        self.bias = Parameter(np.zeros(c_out, dtype=get_default_dtype()))
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, self.stride, self.pad)


def lrelu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.2)


__all__ = ["Module", "Linear", "Conv2d", "Conv1d", "relu", "lrelu"]
