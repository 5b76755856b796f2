"""Independent reference computations used by the test-suite.

Finite differences run in float64 on copies of the inputs; they never call
into the backward closures they are checking.
"""

from __future__ import annotations

import numpy as np

from burnkit import tensor as T
from burnkit.tensor import Tensor

EPS = 1e-3


def numeric_grads(fn, arrays, eps=EPS):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. every array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + eps
            hi = float(fn(*arrays))
            a[idx] = orig - eps
            lo = float(fn(*arrays))
            a[idx] = orig
            g[idx] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def analytic_grads(build, arrays):
    """Run ``build`` on float64 leaf tensors and backprop its scalar output."""
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*leaves)
    out.backward()
    return [leaf.grad for leaf in leaves]


def rel_err(analytic, numeric):
    """Max absolute deviation relative to the gradient's scale."""
    analytic, numeric = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(build, arrays, eps=EPS):
    """Worst relative error over all inputs of ``build`` (scalar-valued)."""

    def value(*arrs):
        return build(*[Tensor(a, dtype=np.float64) for a in arrs]).data

    ana = analytic_grads(build, arrays)
    num = numeric_grads(value, arrays, eps)
    return max(rel_err(a, n) for a, n in zip(ana, num))


def away_from(x, kinks, margin=2e-2):
    """Nudge entries of ``x`` that sit within ``margin`` of any kink."""
    x = np.array(x, dtype=np.float64)
    for k in kinks:
        close = np.abs(x - k) < margin
        x[close] = k + np.where(x[close] >= k, margin, -margin) * 1.5
    return x


def uniform(rng, shape, lo=-2.0, hi=2.0):
    """f32-representable draws in [lo, hi]."""
    return rng.uniform(lo, hi, size=shape).astype(np.float32).astype(np.float64)


def primitive_cases(rng):
    """name -> (scalar-valued build, float64 inputs) for every tensor primitive."""
    x = uniform(rng, (3, 4))
    y = uniform(rng, (3, 4))
    pos = uniform(rng, (3, 4), 0.2, 2.0)
    img = uniform(rng, (2, 3, 4, 4))
    ch = uniform(rng, 3, 0.1, 0.9)
    probe = rng.standard_normal((3, 4))
    iprobe = rng.standard_normal((2, 3, 4, 4))
    wide = rng.standard_normal((2, 5, 4, 4))
    return {
        "add": (lambda a, b: ((a + b) * Tensor(probe)).sum(), [x, y]),
        "add_broadcast": (lambda a, b: ((a + b) * Tensor(probe)).sum(), [x, y[:1]]),
        "mul": (lambda a, b: ((a * b) * Tensor(probe)).sum(), [x, y]),
        "relu": (lambda a: (T.relu(a) * Tensor(probe)).sum(), [away_from(x, [0])]),
        "prelu": (lambda a, s: (T.prelu(a, s) * Tensor(iprobe)).sum(), [away_from(img, [0]), ch]),
        "batchnorm2d_train": (
            lambda a, g, b: (T.batchnorm2d(a, g, b, np.zeros(3), np.ones(3), True) * Tensor(iprobe)).sum(),
            [img, ch, uniform(rng, 3)],
        ),
        "batchnorm2d_eval": (
            lambda a, g, b: (T.batchnorm2d(a, g, b, np.full(3, 0.1), np.full(3, 2.0), False) * Tensor(iprobe)).sum(),
            [img, ch, uniform(rng, 3)],
        ),
        "global_avg_pool": (lambda a: (T.global_avg_pool(a) * Tensor(probe[:2, :3])).sum(), [img]),
        "linear": (lambda a, w, b: (T.linear(a, w, b) * Tensor(probe[:, :2])).sum(), [x, uniform(rng, (2, 4)), uniform(rng, 2)]),
        "log": (lambda a: (T.log(a) * Tensor(probe)).sum(), [pos]),
        "sum": (lambda a: (T.sum_(a, axis=1) * Tensor(probe[:, 0])).sum(), [x]),
        "mean": (lambda a: (T.mean(a, axis=0) * Tensor(probe[0])).sum(), [x]),
        "l2_norm": (lambda a: (T.l2_norm(a, axis=1) * Tensor(probe[:, 0])).sum(), [x]),
        "dot": (lambda a, b: (T.dot(a, b) * Tensor(probe[:, 0])).sum(), [x, y]),
        "softmax": (lambda a: (T.softmax(a) * Tensor(probe)).sum(), [x]),
        "log_softmax": (lambda a: (T.log_softmax(a) * Tensor(probe)).sum(), [x]),
        "div": (lambda a, b: ((a / b) * Tensor(probe)).sum(), [x, pos]),
        "exp": (lambda a: (T.exp(a) * Tensor(probe)).sum(), [x]),
        "abs": (lambda a: (T.abs_(a) * Tensor(probe)).sum(), [away_from(x, [0])]),
        "avg_pool2d": (lambda a: (T.avg_pool2d(a, 2) * Tensor(iprobe[:, :, :2, :2])).sum(), [img]),
        "pad_channels": (lambda a: (T.pad_channels(a, 5) * Tensor(wide)).sum(), [img]),
        "matmul": (lambda a, b: (T.matmul(a, b) * Tensor(probe[:, :3])).sum(), [x, uniform(rng, (4, 3))]),
        "conv2d": (lambda a, w: (T.conv2d(a, w, 2, 1) * Tensor(iprobe[:, :2, :2, :2])).sum(), [img, uniform(rng, (2, 3, 3, 3))]),
    }
