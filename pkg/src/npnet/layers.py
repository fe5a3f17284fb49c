"""Stateful layer wrappers around :mod:`npnet.ops`.

A layer remembers the inputs of its most recent ``forward`` call so that
``backward`` can be chained by hand in reverse order. ``backward`` adds into
``Parameter.grad`` (it never overwrites), and returns the input gradient.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import ops
from .ops import DTYPE


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0


@dataclass
class LayerMacs:
    """One row of a MAC breakdown."""

    name: str
    in_channels: int
    out_channels: int
    kernel: int
    out_h: int
    out_w: int

    @property
    def macs(self) -> int:
        return self.in_channels * self.out_channels * self.kernel * self.kernel * self.out_h * self.out_w


def _init_rng(seed: int, name: str) -> np.random.Generator:
    # keyed by name so a parameter's initial value does not depend on which
    # other layers exist (attention variants share every other weight)
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def he_normal(shape, fan_in: int, seed: int, name: str) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (_init_rng(seed, name).standard_normal(shape) * std).astype(DTYPE)


class Layer:
    training = True

    def parameters(self) -> Iterator[Parameter]:
        for child in self.children():
            yield from child.parameters()

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for child in self.children():
            yield from child.buffers()

    def children(self) -> list["Layer"]:
        return []

    def walk(self) -> Iterator["Layer"]:
        yield self
        for child in self.children():
            yield from child.walk()

    def relu_inputs(self) -> list[np.ndarray]:
        """Pre-activations fed to ReLU by this layer's last forward call."""
        return []

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.training = mode == "train"
        for child in self.children():
            child.set_mode(mode)


class Conv2d(Layer):
    def __init__(self, name, cin, cout, kernel=3, stride=1, dilation=1, padding=None, bias=False, seed=0):
        self.name = name
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        self.stride, self.dilation, self.padding = stride, dilation, padding
        self.weight = Parameter(
            f"{name}.weight", he_normal((cout, cin, kernel, kernel), cin * kernel * kernel, seed, f"{name}.weight")
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(cout)) if bias else None
        self._x = None

    @property
    def spec(self) -> ops.ConvSpec:
        return ops.ConvSpec(
            weight=self.weight.value,
            bias=None if self.bias is None else self.bias.value,
            stride=self.stride,
            padding=self.padding,
            dilation=self.dilation,
        )

    def parameters(self):
        yield self.weight
        if self.bias is not None:
            yield self.bias

    def forward(self, x):
        self._x = x
        return ops.conv2d(x, self.spec)

    def backward(self, dout):
        dx, dw, db = ops.conv2d_backward(dout, self._x, self.spec)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx

    def trace(self, shape, rows: list):
        n, c, h, w = self.spec.output_shape((1,) + tuple(shape))
        rows.append(LayerMacs(self.name, shape[0], c, self.spec.kernel, h, w))
        return (c, h, w)


class Linear(Layer):
    """Fully-connected map applied to (n, c, 1, 1) tensors."""

    def __init__(self, name, cin, cout, seed=0):
        self.name = name
        self.weight = Parameter(f"{name}.weight", he_normal((cout, cin), cin, seed, f"{name}.weight"))
        self.bias = Parameter(f"{name}.bias", np.zeros(cout))
        self._x = None

    def parameters(self):
        yield self.weight
        yield self.bias

    def forward(self, x):
        self._x = x
        v = x.reshape(x.shape[0], -1)
        if v.shape[1] != self.weight.value.shape[1]:
            raise ops.ShapeError(
                f"channel dimension: linear layer {self.name} expects {self.weight.value.shape[1]} features, got {v.shape[1]}"
            )
        out = v @ self.weight.value.T + self.bias.value
        return out.reshape(x.shape[0], -1, 1, 1)

    def backward(self, dout):
        g = dout.reshape(dout.shape[0], -1)
        v = self._x.reshape(self._x.shape[0], -1)
        self.weight.grad += g.T @ v
        self.bias.grad += g.sum(axis=0)
        return (g @ self.weight.value).reshape(self._x.shape)

    def trace(self, shape, rows: list):
        cout, cin = self.weight.value.shape
        rows.append(LayerMacs(self.name, cin, cout, 1, 1, 1))
        return (cout, 1, 1)


class BatchNorm2d(Layer):
    def __init__(self, name, channels, eps=1e-5, momentum=0.9):
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels))
        self.state = ops.BatchNormState(
            gamma=self.gamma.value,
            beta=self.beta.value,
            running_mean=np.zeros(channels, DTYPE),
            running_var=np.ones(channels, DTYPE),
            eps=eps,
            momentum=momentum,
        )
        self._x = None

    def parameters(self):
        yield self.gamma
        yield self.beta

    def buffers(self):
        yield f"{self.name}.running_mean", self.state.running_mean
        yield f"{self.name}.running_var", self.state.running_var

    def set_mode(self, mode):
        super().set_mode(mode)
        self.state.mode = mode

    def forward(self, x, update_stats: bool = True):
        self._x = x
        return ops.batchnorm(x, self.state, update_stats=update_stats)

    def backward(self, dout):
        dx, dg, db = ops.batchnorm_backward(dout, self._x, self.state)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class ConvBNReLU(Layer):
    """Convolution (no bias) followed by batchnorm and ReLU."""

    def __init__(self, name, cin, cout, kernel=3, stride=1, dilation=1, seed=0):
        self.name = name
        self.conv = Conv2d(name, cin, cout, kernel, stride=stride, dilation=dilation, seed=seed)
        self.bn = BatchNorm2d(f"{name}.bn", cout)
        self._pre = None

    def children(self):
        return [self.conv, self.bn]

    def forward(self, x):
        self._pre = self.bn.forward(self.conv.forward(x))
        return ops.relu(self._pre)

    def backward(self, dout):
        return self.conv.backward(self.bn.backward(ops.relu_backward(dout, self._pre)))

    def relu_inputs(self):
        return [] if self._pre is None else [self._pre]

    def trace(self, shape, rows):
        return self.conv.trace(shape, rows)
