"""Parameter containers and layers built on :mod:`fieldpolicy.tensor`."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Tracks parameters and submodules assigned as attributes, in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, m in enumerate(value):
                self._modules[f"{name}.{i}"] = m
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data) for k, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, shape, bound, dtype):
    return T.Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, dtype=None):
        super().__init__()
        dtype = dtype or T.get_default_dtype()
        bound = 1.0 / np.sqrt(n_in)
        self.weight = _uniform(rng, (n_in, n_out), bound, dtype)
        self.bias = _uniform(rng, (n_out,), bound, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True, dtype=None):
        super().__init__()
        dtype = dtype or T.get_default_dtype()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        bound = 1.0 / np.sqrt(c_in * kernel ** 3)
        self.weight = _uniform(rng, (kernel, kernel, kernel, c_in, c_out), bound, dtype)
        self.bias = _uniform(rng, (c_out,), bound, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class InstanceNorm3d(Module):
    """Per-sample, per-channel normalisation over the spatial extent, with affine scale/shift."""

    def __init__(self, channels: int, eps: float = 1e-5, dtype=None):
        super().__init__()
        dtype = dtype or T.get_default_dtype()
        self.eps = eps
        self.scale = T.Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = T.Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        mu = T.mean(x, axis=(1, 2, 3), keepdims=True)
        centred = x - mu
        var = T.mean(T.square(centred), axis=(1, 2, 3), keepdims=True)
        return centred * T.power(var + self.eps, -0.5) * self.scale + self.shift


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=None):
        super().__init__()
        dtype = dtype or T.get_default_dtype()
        self.eps = eps
        self.scale = T.Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.shift = T.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        mu = T.mean(x, axis=-1, keepdims=True)
        centred = x - mu
        var = T.mean(T.square(centred), axis=-1, keepdims=True)
        return centred * T.power(var + self.eps, -0.5) * self.scale + self.shift


def count_conv(c_in: int, c_out: int, kernel: int, bias: bool = True) -> int:
    return kernel ** 3 * c_in * c_out + (c_out if bias else 0)
