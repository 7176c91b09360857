"""Parameter containers and the small layer set the networks are built from."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import ops
from .tensor import Tensor, parameter

DEFAULT_DTYPE = np.float32


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """He-uniform init: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class that discovers parameters, buffers and children by attribute.

    Parameters are :class:`Tensor` attributes with ``requires_grad``; buffers
    are plain ``np.ndarray`` attributes (batch-norm running statistics).  Names
    follow attribute insertion order, so ``state_dict`` ordering is stable.
    """

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (e.g. to float64 for gradient checks)."""
        for m in self.modules():
            for name, value in list(vars(m).items()):
                if isinstance(value, Tensor) and value.requires_grad:
                    value.data = value.data.astype(dtype)
                    value.grad = None
                elif isinstance(value, np.ndarray):
                    setattr(m, name, value.astype(dtype))
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())
        for k, b in self.named_buffers():
            state[k] = b.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = list(self.state_dict().keys())
        missing = [k for k in expected if k not in state]
        extra = [k for k in state if k not in expected]
        if missing or extra:
            raise ValueError(f"checkpoint/architecture mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        params = dict(self.named_parameters())
        for m_prefix, m in _prefixed_modules(self):
            for name, value in vars(m).items():
                if isinstance(value, np.ndarray):
                    key = m_prefix + name
                    arr = np.asarray(state[key])
                    if arr.shape != value.shape:
                        raise ValueError(f"checkpoint/architecture mismatch at {key}: {arr.shape} vs {value.shape}")
                    value[...] = arr
        for key, p in params.items():
            arr = np.asarray(state[key])
            if arr.shape != p.shape:
                raise ValueError(f"checkpoint/architecture mismatch at {key}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype).copy()
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


def _prefixed_modules(module: Module, prefix: str = "") -> Iterator[Tuple[str, Module]]:
    yield prefix, module
    for name, child in module._children():
        yield from _prefixed_modules(child, prefix + name + ".")


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = True, kh: Optional[int] = None):
        kh = k if kh is None else kh
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.weight = parameter(uniform_fan_in(rng, (cout, cin, kh, k), cin * kh * k))
        self.bias = parameter(np.zeros(cout, DEFAULT_DTYPE)) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 2,
                 padding: int = 0, bias: bool = True):
        self.stride = stride
        self.padding = padding
        self.weight = parameter(uniform_fan_in(rng, (cin, cout, k, k), cin * k * k))
        self.bias = parameter(np.zeros(cout, DEFAULT_DTYPE)) if bias else None

    def forward(self, x):
        return ops.conv2d_transpose(x, self.weight, self.bias, self.stride, self.padding)


class Dense(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator):
        self.weight = parameter(uniform_fan_in(rng, (din, dout), din))
        self.bias = parameter(np.zeros(dout, DEFAULT_DTYPE))

    def forward(self, x):
        return ops.dense(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, c: int):
        self.gamma = parameter(np.ones(c, DEFAULT_DTYPE))
        self.beta = parameter(np.zeros(c, DEFAULT_DTYPE))
        self.running_mean = np.zeros(c, DEFAULT_DTYPE)
        self.running_var = np.ones(c, DEFAULT_DTYPE)

    def forward(self, x):
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


class ConvBNAct(Module):
    """Convolution (no bias) -> batch norm -> ReLU or leaky ReLU."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: Optional[int] = None, leak: float = 0.0):
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, padding=padding, bias=False)
        self.bn = BatchNorm2d(cout)
        self.leak = leak

    def forward(self, x):
        y = self.bn(self.conv(x))
        return ops.leaky_relu(y, self.leak) if self.leak else ops.relu(y)
