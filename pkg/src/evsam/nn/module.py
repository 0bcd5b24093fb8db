"""Parameter containers and the handful of layers the models are built from."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    """Registers ``Tensor`` attributes with ``requires_grad`` as parameters
    and ``Module`` attributes (or lists of them) as children, in assignment
    order. Parameter names are dotted attribute paths."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Tensor) for v in value):
            for i, v in enumerate(value):
                if v.requires_grad:
                    self._params[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return _param(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, groups=1, bias=False):
        super().__init__()
        self.stride, self.groups, self.k = stride, groups, k
        self.cin, self.cout = cin, cout
        self.weight = he_normal(rng, (cout, cin // groups, k, k), (cin // groups) * k * k)
        self.bias = _param(np.zeros(cout)) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.k // 2, groups=self.groups)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, rng, bias=True):
        super().__init__()
        self.weight = he_normal(rng, (cin, cout, k, k), cin)
        self.bias = _param(np.zeros(cout)) if bias else None

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, cin, cout, rng, bias=True):
        super().__init__()
        self.weight = _param(rng.standard_normal((cout, cin)) * np.sqrt(1.0 / cin))
        self.bias = _param(np.zeros(cout)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    """Per-channel affine over axis 0 with frozen unit running statistics.

    Training runs one image at a time, so batch statistics are never
    accumulated; the layer is the inference form of batch-norm with
    mean 0 / var 1.
    """

    def __init__(self, c, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.scale = _param(np.ones(c))
        self.shift = _param(np.zeros(c))

    def forward(self, x):
        return F.normalize("batchnorm_infer", x, self.scale, self.shift, self.eps, axis=0)


class LayerNorm(Module):
    def __init__(self, c, axis=-1, eps=1e-5):
        super().__init__()
        self.eps, self.axis = eps, axis
        self.scale = _param(np.ones(c))
        self.shift = _param(np.zeros(c))

    def forward(self, x):
        return F.normalize("layernorm", x, self.scale, self.shift, self.eps, axis=self.axis)
