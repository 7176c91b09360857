"""Gradient-descent and adaptive-moment (Adam) parameter updates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .tensor import Tensor

PLAIN = "sgd"
ADAM = "adam"


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (PLAIN, ADAM):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(state: OptimizerState, params: Mapping[str, Tensor]) -> None:
    """Apply one update in place to every parameter in ``params``."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"optimizer_step: no gradient for {missing[:5]}")
    state.step += 1
    if state.kind == PLAIN:
        for p in params.values():
            p.data -= p.dtype.type(state.lr) * p.grad
        return

    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        denom = np.sqrt(v / c2) + state.eps
        p.data -= (state.lr * (m / c1) / denom).astype(p.dtype, copy=False)


class Optimizer:
    """Binds an :class:`OptimizerState` to a module's parameters."""

    def __init__(self, params: Mapping[str, Tensor], state: OptimizerState):
        self.params = dict(params)
        self.state = state

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        optimizer_step(self.state, self.params)


def sgd(params, lr: float) -> Optimizer:
    return Optimizer(params, OptimizerState(PLAIN, lr))


def adam(params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Optimizer:
    return Optimizer(params, OptimizerState(ADAM, lr, beta1, beta2, eps))
