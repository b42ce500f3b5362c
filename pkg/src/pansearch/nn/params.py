"""Parameters, initialisation and optimisers."""
from __future__ import annotations

import dataclasses

import numpy as np


class Parameter:
    """A value array paired with an accumulated gradient of the same shape."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter(shape={self.value.shape}, dtype={self.value.dtype})"


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _scales(params: list[Parameter], scales) -> list[float]:
    if scales is None:
        return [1.0] * len(params)
    scales = [float(s) for s in scales]
    if len(scales) != len(params):
        raise ValueError(f"{len(scales)} learning-rate scales for {len(params)} parameters")
    return scales


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    """Variance ``2 / fan_in``, which keeps activation scale steady through a ReLU stack."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclasses.dataclass
class MomentumSGD:
    """``v <- mu v + g;  theta <- theta - lr v``; ``lr`` decays per epoch.

    ``scales`` optionally multiplies the step of each parameter.
    """

    params: list[Parameter]
    lr: float = 1e-3
    momentum: float = 0.9
    decay: float = 0.95
    scales: list[float] | None = None

    def __post_init__(self):
        self.velocity = [np.zeros_like(p.value) for p in self.params]
        self.scales = _scales(self.params, self.scales)

    def step(self) -> None:
        for p, v, s in zip(self.params, self.velocity, self.scales):
            v *= self.momentum
            v += p.grad
            p.value -= (self.lr * s * v).astype(p.value.dtype, copy=False)

    def end_epoch(self) -> None:
        self.lr *= self.decay

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclasses.dataclass
class Adam:
    params: list[Parameter]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 1.0
    scales: list[float] | None = None

    def __post_init__(self):
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0
        self.scales = _scales(self.params, self.scales)

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v, s in zip(self.params, self.m, self.v, self.scales):
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad * p.grad
            update = self.lr * s * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value -= update.astype(p.value.dtype, copy=False)

    def end_epoch(self) -> None:
        self.lr *= self.decay

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def make_optimizer(kind: str, params: list[Parameter], lr: float, **kw):
    kind = kind.lower()
    if kind in ("momentum", "sgd", "momentumsgd"):
        return MomentumSGD(params, lr=lr, **kw)
    if kind == "adam":
        return Adam(params, lr=lr, **kw)
    raise ValueError(f"unknown optimizer {kind!r}")
