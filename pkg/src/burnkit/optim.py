"""Optimizers and learning-rate schedules operating on :class:`Parameter` lists."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Parameter


class SGD:
    """SGD with heavy-ball momentum (PyTorch convention) and coupled L2 weight decay."""

    def __init__(self, params: list[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, buf in zip(self.params, self._buf):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data -= (self.lr * buf).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Adam:
    def __init__(self, params: list[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self) -> None:
        self._t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self._t, 1 - b2**self._t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass(frozen=True)
class LrSchedule:
    """``cosine``: base * (1 + cos(pi t / total)) / 2; ``step``: x0.1 at each milestone fraction; ``constant``."""

    base: float
    total: int
    style: str = "cosine"
    milestones: tuple[float, ...] = (0.6, 0.8)

    def __post_init__(self):
        if self.style not in ("cosine", "step", "constant"):
            raise ValueError(f"unknown lr decay style {self.style!r}")

    def at(self, t: int) -> float:
        if self.style == "constant" or self.total <= 0:
            return self.base
        if self.style == "cosine":
            return self.base * (1 + math.cos(math.pi * min(t, self.total) / self.total)) / 2
        drops = sum(t >= int(m * self.total) for m in self.milestones)
        return self.base * 0.1**drops


def make_optimizer(name: str, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0, betas=(0.9, 0.999)):
    if name == "sgd":
        return SGD(params, lr, momentum, weight_decay)
    if name == "adam":
        return Adam(params, lr, betas, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")
