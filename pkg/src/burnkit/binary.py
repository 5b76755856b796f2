"""Binarisation primitives for the f32 training path.

The forward pass sees +-1 values (sign(0) is +1); the backward pass uses the
clipped straight-through estimator, i.e. the derivative of hardtanh.
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, abs_, make_node, mean, mul, prelu, reshape, sub, add, _channel_view

STE_WINDOW = 1.0


class BinarizeMode(enum.Enum):
    NONE = "none"
    ACTIVATIONS_ONLY = "activations"
    FULL_BINARY = "full"

    @property
    def stage(self) -> int:
        return {BinarizeMode.NONE: 0, BinarizeMode.ACTIVATIONS_ONLY: 1, BinarizeMode.FULL_BINARY: 2}[self]

    @property
    def binarize_activations(self) -> bool:
        return self is not BinarizeMode.NONE

    @property
    def binarize_weights(self) -> bool:
        return self is BinarizeMode.FULL_BINARY


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with the tie broken towards +1."""
    one = x.dtype.type(1)
    return np.where(x >= 0, one, -one)


def sign_ste(x: Tensor) -> Tensor:
    mask = np.abs(x.data) <= STE_WINDOW
    return make_node(sign(x.data), (x,), lambda g: (g * mask,))


def _check_channels(x: Tensor, *params: Tensor) -> None:
    if x.ndim < 2:
        raise DimensionError(f"expected [N, C, ...] input, got {x.shape}")
    for p in params:
        if p.shape != (x.shape[1],):
            raise DimensionError(f"per-channel parameter of shape {p.shape} does not match C={x.shape[1]}")


def rsign(x: Tensor, beta: Tensor) -> Tensor:
    """Sign with a learnable per-channel threshold: ``sign_ste(x - beta)``."""
    _check_channels(x, beta)
    return sign_ste(sub(x, reshape(beta, _channel_view(beta.data, x.ndim).shape)))


def rprelu(x: Tensor, gamma: Tensor, zeta: Tensor, slope: Tensor) -> Tensor:
    """``prelu(x - gamma) + zeta``; every parameter is per channel."""
    _check_channels(x, gamma, zeta, slope)
    shape = _channel_view(gamma.data, x.ndim).shape
    return add(prelu(sub(x, reshape(gamma, shape)), slope), reshape(zeta, shape))


def channel_scale(w: Tensor) -> Tensor:
    """Mean absolute value of each output channel (row 0 axis) of ``w``."""
    return mean(abs_(reshape(w, (w.shape[0], -1))), axis=1)


def binarize_weight(w: Tensor) -> Tensor:
    """``channel_scale(w)`` broadcast times ``sign_ste(w)``."""
    scale = channel_scale(w)
    return mul(sign_ste(w), reshape(scale, (w.shape[0],) + (1,) * (w.ndim - 1)))
