"""Deterministic in-place parameter update rules."""

from __future__ import annotations

from typing import Iterable, List

import numpy as np

from .tensor import ShapeError, Tensor


class Optimizer:
    def __init__(self, params: Iterable[Tensor]):
        self.params: List[Tensor] = list(params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        raise NotImplementedError

    def _grad(self, p: Tensor):
        if p.grad is None:
            return None
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"grad shape {p.grad.shape} != param shape {p.data.shape}")
        return p.grad


class SGD(Optimizer):
    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0):
        super().__init__(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, vel in zip(self.params, self._velocity):
            g = self._grad(p)
            if g is None:
                continue
            if self.momentum:
                vel *= self.momentum
                vel += g
                g = vel
            p.data -= p.dtype.type(self.lr) * g


class Adam(Optimizer):
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1 - b1 ** self._t
        bias2 = 1 - b2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            g = self._grad(p)
            if g is None:
                continue
            dt = p.dtype.type
            m *= dt(b1)
            m += dt(1 - b1) * g
            v *= dt(b2)
            v += dt(1 - b2) * g * g
            m_hat = m / dt(bias1)
            v_hat = v / dt(bias2)
            p.data -= dt(self.lr) * m_hat / (np.sqrt(v_hat) + dt(self.eps))


def make_optimizer(params: Iterable[Tensor], rule: str, lr: float,
                   momentum: float = 0.0) -> Optimizer:
    if rule == "sgd":
        return SGD(params, lr=lr, momentum=momentum)
    if rule == "adam":
        return Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer rule '{rule}'")
