"""Dense tensors with a reverse-mode gradient tape.

Every differentiable op records its parents and a closure that maps the
upstream gradient to one gradient per parent.  ``Tensor.backward`` walks the
recorded graph in reverse topological order.  Layout is row-major NCHW and
values are float32 unless ``dtype=np.float64`` is requested explicitly,
which the gradient checks use to get clean finite differences.
"""

from __future__ import annotations

import contextlib
import enum
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


def _as_array(data, dtype=None) -> np.ndarray:
    return np.asarray(data).astype(dtype or np.float32, copy=False)


class Tensor:
    __array_priority__ = 100.0
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data: np.ndarray = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- reverse mode ----------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every reachable node."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor with no recorded tape")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


class ParamGroup(enum.Enum):
    FP_CLASSIFIER = "fp_classifier"
    BINARY_EXTRACTOR = "bin_extractor"
    BINARY_CLASSIFIER = "bin_classifier"
    FROZEN = "frozen"


class Parameter(Tensor):
    """A named leaf tensor that belongs to one optimisation group.

    Frozen parameters are created with ``requires_grad=False`` so the tape
    never routes gradient into them.
    """

    __slots__ = ("name", "group")

    def __init__(self, data, name: str = "", group: ParamGroup = ParamGroup.FROZEN):
        super().__init__(data, requires_grad=group is not ParamGroup.FROZEN)
        self.name = name
        self.group = group

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, group={self.group.value})"


# ---------------------------------------------------------------------------
# graph helpers


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` as the output of an op; records the tape edge if needed."""
    out = Tensor(data, dtype=data.dtype if data.dtype.kind == "f" else None)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    """Natural log; non-positive entries give -inf/NaN as numpy does."""
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs_(x: Tensor) -> Tensor:
    return make_node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x: Tensor) -> Tensor:
    return make_node(np.maximum(x.data, 0), (x,), lambda g: (np.where(x.data > 0, g, 0).astype(g.dtype, copy=False),))


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a per-channel vector so it broadcasts over axis 1."""
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Channel-wise PReLU on ``[N, C, ...]`` input; ``slope`` has length C."""
    if x.ndim < 2 or slope.shape != (x.shape[1],):
        raise DimensionError(f"prelu slope shape {slope.shape} does not match channels of {x.shape}")
    a = _channel_view(slope.data, x.ndim)
    neg = np.minimum(x.data, 0)
    out = np.maximum(x.data, 0) + a * neg
    reduce_axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gx = np.where(x.data > 0, g, g * a) if x.requires_grad else None
        gs = (g * neg).sum(axis=reduce_axes) if slope.requires_grad else None
        return gx, gs

    return make_node(out, (x, slope), backward)


# ---------------------------------------------------------------------------
# reductions and shape


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=ax, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    return make_node(out, (x,), lambda g: (_expand(g, x.shape, ax, keepdims).copy(),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    count = x.size if ax is None else int(np.prod([x.shape[a] for a in ax]))
    out = np.mean(x.data, axis=ax, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    return make_node(out, (x,), lambda g: (_expand(g / count, x.shape, ax, keepdims).copy(),))


def reshape(x: Tensor, shape) -> Tensor:
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def l2_norm(x: Tensor, axis=-1, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    """Euclidean norm along ``axis``, floored at ``eps`` (no gradient below the floor)."""
    ax = _norm_axis(axis, x.ndim)
    raw = np.sqrt(np.sum(np.square(x.data, dtype=np.float64), axis=ax, keepdims=True))
    n = np.maximum(raw, eps).astype(x.dtype)
    out = n if keepdims else np.squeeze(n, axis=ax)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        live = raw > eps if eps > 0 else raw > 0
        safe = np.where(live, n, 1).astype(x.dtype)
        return (gk * np.where(live, x.data / safe, 0).astype(x.dtype),)

    return make_node(out, (x,), backward)


def dot(a: Tensor, b: Tensor, axis=-1) -> Tensor:
    """Inner product along ``axis`` (row-wise dot for matrices)."""
    if a.shape != b.shape:
        raise DimensionError(f"dot operands differ in shape: {a.shape} vs {b.shape}")
    ax = _norm_axis(axis, a.ndim)
    out = np.sum(a.data.astype(np.float64) * b.data, axis=ax).astype(a.dtype)

    def backward(g):
        gk = np.expand_dims(g, ax)
        return (gk * b.data if a.requires_grad else None, gk * a.data if b.requires_grad else None)

    return make_node(out, (a, b), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_node(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: x {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``w[F,C,kh,kw]``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride={stride} / padding={padding}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if kh > h + 2 * padding or kw > wd + 2 * padding or ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d output would be empty: x {x.shape}, w {w.shape}, pad {padding}")

    # channel-major im2col: cols[(i, j, c), (n, y, x)]
    hp, wp = h + 2 * padding, wd + 2 * padding
    xc = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xc[:, :, padding:padding + h, padding:padding + wd] = x.data.transpose(1, 0, 2, 3)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xc[:, :, i:i + span_h:stride, j:j + span_w:stride]
    cols = cols.reshape(kh * kw * c, n * ho * wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(f, -1)
    out = (wmat @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, -1)
        gw = None
        if w.requires_grad:
            gw = np.ascontiguousarray((gc @ cols.T).reshape(f, kh, kw, c).transpose(0, 3, 1, 2))
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gc).reshape(kh, kw, c, n, ho, wo)
            gxc = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxc[:, :, i:i + span_h:stride, j:j + span_w:stride] += dcols[i, j]
            gx = np.ascontiguousarray(gxc[:, :, padding:padding + h, padding:padding + wd].transpose(1, 0, 2, 3))
        return gx, gw

    return make_node(np.ascontiguousarray(out), (x, w), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial axes: ``[N, C, H, W] -> [N, C]``."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))
    return make_node(out, (x,), lambda g: (np.broadcast_to((g / hw)[:, :, None, None], x.shape).copy(),))


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping ``k x k`` average pooling; trailing rows/cols that do not fill a window are dropped."""
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise DimensionError(f"avg_pool2d window {k} larger than input {h}x{w}")
    view = x.data[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
    out = view.mean(axis=(3, 5))

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :ho * k, :wo * k] = np.repeat(np.repeat(g / (k * k), k, axis=2), k, axis=3)
        return (gx,)

    return make_node(out, (x,), backward)


def pad_channels(x: Tensor, c_out: int) -> Tensor:
    """Zero-extend the channel axis of an NCHW tensor to ``c_out`` channels."""
    c = x.shape[1]
    if c_out < c:
        raise DimensionError(f"cannot pad {c} channels down to {c_out}")
    if c_out == c:
        return x
    out = np.zeros((x.shape[0], c_out) + x.shape[2:], dtype=x.dtype)
    out[:, :c] = x.data
    return make_node(out, (x,), lambda g: (g[:, :c].copy(),))


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, as is conventional).  In eval
    mode the running buffers are used and the op is affine in ``x``.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm2d shape mismatch: x {x.shape}, gamma {gamma.shape}")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    mu = mu.astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                gx = (dxhat - s1 / m - xhat * s2 / m) * inv_std[None, :, None, None]
            else:
                gx = dxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# probability


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; NaN inputs propagate to NaN outputs."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(labels.size), labels] = 1
    return -(log_softmax(logits) * onehot).sum() * (1.0 / labels.size)


def zero_grad(params) -> None:
    for p in params:
        if p.requires_grad:
            p.zero_grad()
