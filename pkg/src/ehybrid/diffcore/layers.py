"""Parameter containers and the small layers the networks are built from."""

from __future__ import annotations

import zlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor

BN_MOMENTUM = 0.01
BN_EPS = 1e-3


class ParamStore(OrderedDict):
    """Named tensors of a model: trainable weights plus running statistics."""

    def __init__(self, items=(), running=()):
        super().__init__(items)
        self.running = set(running)

    def trainable(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self.items() if k not in self.running)

    def count(self, trainable_only: bool = True) -> int:
        tensors = self.trainable().values() if trainable_only else self.values()
        return int(sum(t.size for t in tensors))


class Module:
    """Minimal module tree with named parameters and buffers.

    Parameters are created with an initialization rule and filled by
    :func:`init_parameters`, which seeds each tensor from its full dotted
    name so identically named layers in different models start equal.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._init: dict[str, tuple] = {}
        self._buffers: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def add_param(self, name: str, shape: tuple, init: str, fan_in: int = 1, dtype=np.float32) -> Tensor:
        t = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)
        self._params[name] = t
        self._init[name] = (init, fan_in)
        setattr(self, name, t)
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, name=name)
        self._buffers[name] = t
        setattr(self, name, t)
        return t

    def add_child(self, name: str, module: "Module | None"):
        if module is not None:
            self._children[name] = module
        setattr(self, name, module)
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._buffers.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def named_inits(self, prefix: str = "") -> Iterator[tuple[str, Tensor, tuple]]:
        for name, t in self._params.items():
            yield prefix + name, t, self._init[name]
        for cname, child in self._children.items():
            yield from child.named_inits(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_store(self) -> ParamStore:
        params = list(self.named_parameters())
        buffers = list(self.named_buffers())
        return ParamStore(params + buffers, running=[n for n, _ in buffers])

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def astype(self, dtype) -> "Module":
        for _, t in list(self.named_parameters()) + list(self.named_buffers()):
            t.data = t.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def truncated_normal(rng: np.random.Generator, shape: tuple, std: float) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2
    return z * std


def param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_parameters(module: Module, seed: int) -> None:
    for name, t, (rule, fan_in) in module.named_inits():
        if rule == "he":
            values = truncated_normal(param_rng(seed, name), t.shape, np.sqrt(2.0 / fan_in))
        elif rule == "ones":
            values = np.ones(t.shape)
        elif rule == "zeros":
            values = np.zeros(t.shape)
        else:
            raise ValueError(f"unknown init rule {rule!r} for {name}")
        t.data = values.astype(t.dtype)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, bias: bool = False, dtype=np.float32):
        super().__init__()
        self.stride, self.padding = stride, k // 2
        self.add_param("weight", (c_out, c_in, k, k), "he", fan_in=c_in * k * k, dtype=dtype)
        self.bias = self.add_param("bias", (c_out,), "zeros", dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.stride, self.padding, bias=self.bias)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, k: int, stride: int = 1, dtype=np.float32):
        super().__init__()
        self.stride, self.padding = stride, k // 2
        self.add_param("weight", (channels, 1, k, k), "he", fan_in=k * k, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.add_param("gamma", (channels,), "ones", dtype=dtype)
        self.add_param("beta", (channels,), "zeros", dtype=dtype)
        self.add_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.add_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class SqueezeExcite(Module):
    def __init__(self, channels: int, reduced: int, activation: str = "swish", dtype=np.float32):
        super().__init__()
        self.activation = activation
        self.add_param("w1", (reduced, channels, 1, 1), "he", fan_in=channels, dtype=dtype)
        self.add_param("b1", (reduced,), "zeros", dtype=dtype)
        self.add_param("w2", (channels, reduced, 1, 1), "he", fan_in=reduced, dtype=dtype)
        self.add_param("b2", (channels,), "zeros", dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.squeeze_excitation(x, self.w1, self.b1, self.w2, self.b2, self.activation)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, dtype=np.float32):
        super().__init__()
        self.add_param("weight", (c_out, c_in), "he", fan_in=c_in, dtype=dtype)
        self.add_param("bias", (c_out,), "zeros", dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)
