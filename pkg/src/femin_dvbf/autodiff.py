"""A small reverse-mode automatic differentiation engine over numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure propagating the output gradient back to them.  Graph recording is
switched off inside :func:`no_grad`.  Values are float64; a non-finite
result raises :class:`NonFiniteError` immediately.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "tensor",
    "stop_gradient",
    "concat",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softplus",
    "gelu",
    "tanh_scaled",
    "sqrt",
    "square",
    "backward",
    "dense",
    "gauss_nll",
    "gauss_kl",
    "gauss_fuse",
]

_GRAD_ENABLED = True
CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense float64 array with an optional autodiff history."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = "leaf"
        self.name = name

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op})"

    def __len__(self):
        return len(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # -- operators -------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    a = tensor(a)

    def bw(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(a.data ** exponent, (a,), bw, "pow")


def square(a: Tensor) -> Tensor:
    a = tensor(a)

    def bw(g):
        a._accumulate(2.0 * g * a.data)

    return _make(a.data * a.data, (a,), bw, "square")


def sqrt(a: Tensor) -> Tensor:
    a = tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        a._accumulate(0.5 * g / out)

    return _make(out, (a,), bw, "sqrt")


def exp(a: Tensor) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out)

    return _make(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    a = tensor(a)

    def bw(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), bw, "log")


# ---------------------------------------------------------------------------
# activations


def tanh(a: Tensor) -> Tensor:
    a = tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        a._accumulate(g * (1.0 - out * out))

    return _make(out, (a,), bw, "tanh")


def tanh_scaled(a: Tensor, scale: float) -> Tensor:
    """``scale * tanh(a)``; bounded strictly by ``scale`` in magnitude."""
    if not scale > 0:
        raise ValueError("tanh scale must be positive")
    a = tensor(a)
    th = np.tanh(a.data)

    def bw(g):
        a._accumulate(g * scale * (1.0 - th * th))

    return _make(scale * th, (a,), bw, "tanh_scaled")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = tensor(a)
    out = _sigmoid_np(a.data)

    def bw(g):
        a._accumulate(g * out * (1.0 - out))

    return _make(out, (a,), bw, "sigmoid")


def softplus_np(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a: Tensor) -> Tensor:
    a = tensor(a)

    def bw(g):
        a._accumulate(g * _sigmoid_np(a.data))

    return _make(softplus_np(a.data), (a,), bw, "softplus")


_GELU_C = math.sqrt(2.0 / math.pi)
_LOG_2PI = math.log(2.0 * math.pi)


def gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        a._accumulate(g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner))

    return _make(0.5 * x * (1.0 + th), (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# shape / reduction ops


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = tensor(a)

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def getitem(a: Tensor, index) -> Tensor:
    a = tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _make(np.array(a.data[index]), (a,), bw, "getitem")


def concat(items: Sequence, axis: int = -1) -> Tensor:
    items = [tensor(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(items, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in items], axis=axis), items, bw, "concat")


def stop_gradient(a) -> Tensor:
    """Value passes through; no gradient ever flows back to ``a``."""
    a = tensor(a)
    out = Tensor(a.data.copy())
    out._op = "stop_gradient"
    return out


# ---------------------------------------------------------------------------
# fused kernels: one graph node where the composed version would need many


def dense(x, w: Tensor, b: Tensor, activation: str = "linear") -> Tensor:
    """``act(x @ w + b)`` for ``x`` of shape ``[batch, in]``."""
    x = tensor(x)
    pre = x.data @ w.data + b.data
    if activation == "linear":
        out, dact = pre, None
    elif activation == "gelu":
        x2 = pre * pre
        th = np.tanh(_GELU_C * pre * (1.0 + 0.044715 * x2))
        out = 0.5 * pre * (1.0 + th)
        dact = 0.5 * (1.0 + th) + 0.5 * pre * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
    elif activation == "softplus":
        out, dact = softplus_np(pre), _sigmoid_np(pre)
    elif activation == "sigmoid":
        out = _sigmoid_np(pre)
        dact = out * (1.0 - out)
    else:
        raise ValueError(f"unknown activation {activation!r}")

    def bw(g):
        gp = g if dact is None else g * dact
        if x.requires_grad:
            x._accumulate(gp @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ gp)
        if b.requires_grad:
            b._accumulate(gp.sum(axis=0))

    return _make(out, (x, w, b), bw, f"dense_{activation}")


def gauss_nll(x, mu: Tensor, sigma: Tensor) -> Tensor:
    """Row-wise Gaussian NLL, summed over the last axis; ``x`` is data."""
    xv = x.data if isinstance(x, Tensor) else np.asarray(x, float)
    err = xv - mu.data
    inv = 1.0 / sigma.data
    z2 = (err * inv) ** 2
    out = (np.log(sigma.data) + 0.5 * z2).sum(axis=-1) + 0.5 * xv.shape[-1] * _LOG_2PI

    def bw(g):
        g = g[..., None]
        if mu.requires_grad:
            mu._accumulate(-g * err * inv * inv)
        if sigma.requires_grad:
            sigma._accumulate(g * inv * (1.0 - z2))

    return _make(out, (mu, sigma), bw, "gauss_nll")


def gauss_kl(mq: Tensor, sq: Tensor, mp: Tensor, sp: Tensor) -> Tensor:
    """Row-wise KL(N(mq, sq^2) || N(mp, sp^2)), summed over the last axis."""
    diff = mq.data - mp.data
    ip2 = 1.0 / (sp.data * sp.data)
    ratio = sq.data * sq.data * ip2
    maha = diff * diff * ip2
    out = 0.5 * (ratio + maha - np.log(ratio) - 1.0).sum(axis=-1)

    def bw(g):
        g = g[..., None]
        if mq.requires_grad:
            mq._accumulate(g * diff * ip2)
        if mp.requires_grad:
            mp._accumulate(-g * diff * ip2)
        if sq.requires_grad:
            sq._accumulate(g * (sq.data * ip2 - 1.0 / sq.data))
        if sp.requires_grad:
            sp._accumulate(g * (1.0 - ratio - maha) / sp.data)

    return _make(out, (mq, sq, mp, sp), bw, "gauss_kl")


def gauss_fuse(m1: Tensor, s1: Tensor, m2: Tensor, s2: Tensor):
    """Mean and std of the normalized product of two diagonal Gaussians."""
    v1, v2 = s1.data * s1.data, s2.data * s2.data
    tot = v1 + v2
    mu = (m1.data * v2 + m2.data * v1) / tot
    sig = np.sqrt(v1 * v2 / tot)

    def bw_mu(g):
        if m1.requires_grad:
            m1._accumulate(g * v2 / tot)
        if m2.requires_grad:
            m2._accumulate(g * v1 / tot)
        if s1.requires_grad:
            s1._accumulate(g * (m2.data - mu) / tot * 2.0 * s1.data)
        if s2.requires_grad:
            s2._accumulate(g * (m1.data - mu) / tot * 2.0 * s2.data)

    def bw_sig(g):
        scale = g / (sig * tot * tot)
        if s1.requires_grad:
            s1._accumulate(scale * s1.data * v2 * v2)
        if s2.requires_grad:
            s2._accumulate(scale * s2.data * v1 * v1)

    parents = (m1, s1, m2, s2)
    return _make(mu, parents, bw_mu, "gauss_fuse_mu"), _make(sig, (s1, s2), bw_sig, "gauss_fuse_sigma")


# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor, free_graph: bool = True) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Intermediate gradients are discarded after use; the graph is released
    when ``free_graph`` is set.
    """
    if loss.data.size != 1:
        raise ValueError("backward() needs a scalar loss")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        g = node.grad
        if g is not None:
            node._backward(g)
        node.grad = None
        if free_graph:
            node._backward = None
            node._parents = ()


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    return math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
