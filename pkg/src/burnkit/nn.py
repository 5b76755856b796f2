"""Minimal layer/module system on top of :mod:`burnkit.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .binary import BinarizeMode, binarize_weight, rprelu, rsign
from .errors import LoadError
from .tensor import Parameter, ParamGroup, Tensor


class Module:
    """Parameters, buffers and sub-modules are discovered from attributes in
    assignment order, which fixes the order of ``state_dict``."""

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def assign_names(self, prefix: str = "") -> "Module":
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def set_group(self, group: ParamGroup) -> "Module":
        for p in self.parameters():
            p.group = group
            p.requires_grad = group is not ParamGroup.FROZEN
            if not p.requires_grad:
                p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, each in discovery order."""
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: b.copy() for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy tensors in place; ``prefix`` is only used to name offenders in errors."""
        targets: dict[str, np.ndarray] = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        for name, dst in targets.items():
            if name not in state:
                raise LoadError(f"checkpoint is missing tensor {prefix + name!r}", prefix + name)
            src = np.asarray(state[name])
            if src.shape != dst.shape:
                raise LoadError(f"tensor {prefix + name!r} has shape {src.shape}, expected {dst.shape}", prefix + name)
        for name, dst in targets.items():
            dst[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = math.sqrt(2.0)) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    """Bias-free 3x3-style convolution whose weight is binarised in FullBinary mode."""

    def __init__(self, cin: int, cout: int, k: int, stride: int, padding: int, rng, group: ParamGroup, binary: bool = False):
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k), group=group)
        self.stride = stride
        self.padding = padding
        self.binary = binary
        self.mode = BinarizeMode.NONE

    def effective_weight(self) -> Tensor:
        if self.binary and self.mode.binarize_weights:
            return binarize_weight(self.weight)
        return self.weight

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.effective_weight(), self.stride, self.padding)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng, group: ParamGroup, binary: bool = False, bias: bool = True):
        # kaiming-uniform with a=sqrt(5), i.e. bound 1/sqrt(fan_in)
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(np.float32), group=group)
        self.bias = Parameter(rng.uniform(-bound, bound, size=(fan_out,)).astype(np.float32), group=group) if bias else None
        self.binary = binary
        self.mode = BinarizeMode.NONE

    def effective_weight(self) -> Tensor:
        if self.binary and self.mode.binarize_weights:
            return binarize_weight(self.weight)
        return self.weight

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.effective_weight(), self.bias)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c: int, group: ParamGroup, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(c, np.float32), group=group)
        self.beta = Parameter(np.zeros(c, np.float32), group=group)
        self.running_mean = np.zeros(c, np.float32)
        self.running_var = np.ones(c, np.float32)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps)


class RSign(Module):
    def __init__(self, c: int, group: ParamGroup):
        self.beta = Parameter(np.zeros(c, np.float32), group=group)

    def forward(self, x: Tensor) -> Tensor:
        return rsign(x, self.beta)


class RPReLU(Module):
    def __init__(self, c: int, group: ParamGroup, slope: float = 0.25):
        self.gamma = Parameter(np.zeros(c, np.float32), group=group)
        self.zeta = Parameter(np.zeros(c, np.float32), group=group)
        self.slope = Parameter(np.full(c, slope, np.float32), group=group)

    def forward(self, x: Tensor) -> Tensor:
        return rprelu(x, self.gamma, self.zeta, self.slope)
