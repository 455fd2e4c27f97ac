"""Reverse-mode autodiff over numpy arrays.

A `Tensor` wraps an ndarray together with an optional gradient accumulator.
Operations build a dynamic tape; `backward()` walks it in reverse
topological order.  The op set is deliberately limited to what the
prediction model needs (dense linear algebra, pointwise nonlinearities,
masked softmax, layer norm, gather) rather than a general framework.

Compute is 32-bit by default.  `using_dtype(np.float64)` switches newly
created tensors to 64-bit, which exists for finite-difference gradient
checking only.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from fimp.errors import DimensionError, MaskedSoftmaxError

_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported compute dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
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
    """An ndarray plus a same-shape gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    # Make `ndarray <op> Tensor` defer to the reflected Tensor operators.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._bw = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            # Copy: the caller may hand the same buffer to several parents.
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def _accum_own(self, g: np.ndarray) -> None:
        """Accumulate a freshly allocated buffer the caller exclusively owns
        (same shape/dtype as data); may be adopted without copying."""
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- autograd ---------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = self._topo_order()
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in order:
            if node._bw is not None:
                node._bw(node.grad)
                node.grad = None  # each tape node fires once; free eagerly

    def _topo_order(self) -> list:
        """Reverse topological order of grad-requiring ancestors."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            nid = id(node)
            if nid in seen:
                continue
            seen.add(nid)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        order.reverse()
        return order

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, other, neg_b=True)

    def __rsub__(self, other):
        return _add(-self, other)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return _div(self, other)
        return _mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return _div(_const_like(other, self), self)

    def __neg__(self):
        out = _make(-self.data, (self,))
        if out.requires_grad:
            out._bw = lambda g: self._accum_own(-g)
        return out

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        out = _make(self.data ** exponent, (self,))
        if out.requires_grad:
            d = exponent * self.data ** (exponent - 1)
            out._bw = lambda g: self._accum_own(g * d)
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        out = _make(self.data[key], (self,))
        if out.requires_grad:
            def bw(g, key=key):
                if self.grad is None:
                    self.grad = np.zeros_like(self.data)
                self.grad[key] += g
            out._bw = bw
        return out

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,))
        if out.requires_grad:
            out._bw = lambda g: self._accum_own(g.reshape(self.data.shape))
        return out

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        out = _make(self.data.transpose(axes), (self,))
        if out.requires_grad:
            inv = tuple(np.argsort(axes))
            out._bw = lambda g: self._accum_own(g.transpose(inv))
        return out

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.data.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            out._bw = lambda g: self._accum(
                _expand_reduced(g, self.data.shape, axis, keepdims))
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else _axis_size(self.data.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _axis_size(shape, axis) -> int:
    if isinstance(axis, int):
        return shape[axis]
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def _expand_reduced(g, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def _make(data: np.ndarray, parents: tuple) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._bw = None
    return out


def _const_like(x, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


def _coerce(other, ref: Tensor):
    """Return (ndarray, tensor_or_None) for the second operand."""
    if isinstance(other, Tensor):
        return other.data, other
    return np.asarray(other, dtype=ref.data.dtype), None


def _add(a: Tensor, other, neg_b: bool = False) -> Tensor:
    bdata, b = _coerce(other, a)
    data = a.data - bdata if neg_b else a.data + bdata
    parents = (a, b) if b is not None else (a,)
    out = _make(data, parents)
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                ga = _unbroadcast(g, a.data.shape)
                (a._accum if ga is g else a._accum_own)(ga)
            if b is not None and b.requires_grad:
                gb = _unbroadcast(g, b.data.shape)
                if neg_b:
                    b._accum_own(-gb)
                else:
                    (b._accum if gb is g else b._accum_own)(gb)
        out._bw = bw
    return out


def _mul(a: Tensor, other) -> Tensor:
    bdata, b = _coerce(other, a)
    out = _make(a.data * bdata, (a, b) if b is not None else (a,))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accum_own(_unbroadcast(g * bdata, a.data.shape))
            if b is not None and b.requires_grad:
                b._accum_own(_unbroadcast(g * a.data, b.data.shape))
        out._bw = bw
    return out


def _div(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data / b.data, (a, b))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accum_own(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accum_own(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        out._bw = bw
    return out


def matmul(a: Tensor, other) -> Tensor:
    bdata, b = _coerce(other, a)
    if a.data.ndim < 2 or bdata.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != bdata.shape[-2]:
        raise DimensionError(
            f"matmul inner dims differ: {a.data.shape} @ {bdata.shape}")
    out = _make(a.data @ bdata, (a, b) if b is not None else (a,))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                ga = g @ bdata.swapaxes(-1, -2)
                a._accum_own(_unbroadcast(ga, a.data.shape))
            if b is not None and b.requires_grad:
                if b.data.ndim == 2 and a.data.ndim > 2:
                    # Common case: shared projection matrix under a batch.
                    k, m = b.data.shape
                    gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
                else:
                    gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
                b._accum_own(gb)
        out._bw = bw
    return out


# -- pointwise nonlinearities ---------------------------------------------

def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = _make(e, (x,))
    if out.requires_grad:
        out._bw = lambda g: x._accum_own(g * e)
    return out


def log(x: Tensor) -> Tensor:
    out = _make(np.log(x.data), (x,))
    if out.requires_grad:
        out._bw = lambda g: x._accum_own(g / x.data)
    return out


def sqrt(x: Tensor) -> Tensor:
    s = np.sqrt(x.data)
    out = _make(s, (x,))
    if out.requires_grad:
        out._bw = lambda g: x._accum_own(g * (0.5 / s))
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = _make(t, (x,))
    if out.requires_grad:
        out._bw = lambda g: x._accum_own(g * (1.0 - t * t))
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = _make(s, (x,))
    if out.requires_grad:
        out._bw = lambda g: x._accum_own(g * (s * (1.0 - s)))
    return out


def relu(x: Tensor) -> Tensor:
    out = _make(np.maximum(x.data, 0), (x,))
    if out.requires_grad:
        m = x.data > 0
        out._bw = lambda g: x._accum_own(g * m)
    return out


def elu(x: Tensor) -> Tensor:
    neg = x.data < 0
    e = np.where(neg, np.exp(np.minimum(x.data, 0.0)), 1.0)
    out = _make(np.where(neg, e - 1.0, x.data), (x,))
    if out.requires_grad:
        d = np.where(neg, e, 1.0)
        out._bw = lambda g: x._accum_own(g * d)
    return out


def absolute(x: Tensor) -> Tensor:
    out = _make(np.abs(x.data), (x,))
    if out.requires_grad:
        s = np.sign(x.data)
        out._bw = lambda g: x._accum_own(g * s)
    return out


# -- structural ops --------------------------------------------------------

def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in ts]
        splits = np.cumsum(sizes)[:-1]
        def bw(g):
            for t, gpart in zip(ts, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    t._accum(gpart)
        out._bw = bw
    return out


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = _make(np.stack([t.data for t in ts], axis=axis), tuple(ts))
    if out.requires_grad:
        def bw(g):
            for i, t in enumerate(ts):
                if t.requires_grad:
                    t._accum_own(np.take(g, i, axis=axis))
        out._bw = bw
    return out


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis -2 with shared leading batch dims.

    x: [*B, N, C]; idx: integer array [*B, *S] -> out [*B, *S, C].
    Duplicate indices accumulate gradient.
    """
    idx = np.asarray(idx)
    nbatch = x.data.ndim - 2
    if idx.ndim < nbatch or idx.shape[:nbatch] != x.data.shape[:nbatch]:
        raise DimensionError(
            f"gather index leading dims {idx.shape} do not match {x.data.shape}")
    if nbatch == 0:
        key = (idx,)
    else:
        key = tuple(
            np.arange(x.data.shape[i]).reshape(
                (1,) * i + (-1,) + (1,) * (idx.ndim - i - 1))
            for i in range(nbatch)
        ) + (idx,)
    out = _make(x.data[key], (x,))
    if out.requires_grad:
        def bw(g):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, key, g)
        out._bw = bw
    return out


def cumsum(x: Tensor, axis: int = 0) -> Tensor:
    out = _make(np.cumsum(x.data, axis=axis), (x,))
    if out.requires_grad:
        def bw(g):
            rev = np.flip(g, axis=axis)
            x._accum_own(np.flip(np.cumsum(rev, axis=axis), axis=axis))
        out._bw = bw
    return out


def softmax(x: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along `axis`; entries where `mask` is False contribute exactly 0.

    `mask` must be broadcastable to x.shape and leave at least one allowed
    entry per row.
    """
    if mask is None:
        m = x.data.max(axis=axis, keepdims=True)
        e = np.exp(x.data - m)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
        if not mask.any(axis=axis).all():
            raise MaskedSoftmaxError("softmax row with all entries masked")
        neg = np.array(-np.inf, dtype=x.data.dtype)
        xm = np.where(mask, x.data, neg)
        m = xm.max(axis=axis, keepdims=True)
        e = np.exp(xm - m)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _make(s, (x,))
    if out.requires_grad:
        def bw(g):
            inner = (g * s).sum(axis=axis, keepdims=True)
            x._accum_own(s * (g - inner))
        out._bw = bw
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for 2-D weights (one tape node per layer)."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(f"affine dims differ: {x.data.shape} @ {w.data.shape}")
    out = _make(x.data @ w.data + b.data, (x, w, b))
    if out.requires_grad:
        def bw(g):
            if x.requires_grad:
                x._accum_own(g @ w.data.T)
            if w.requires_grad:
                k, m = w.data.shape
                w._accum_own(x.data.reshape(-1, k).T @ g.reshape(-1, m))
            if b.requires_grad:
                b._accum_own(g.reshape(-1, g.shape[-1]).sum(axis=0))
        out._bw = bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    C = x.data.shape[-1]
    if C <= 1:
        raise DimensionError("layer_norm needs at least 2 features (variance is degenerate)")
    if gain.data.shape != (C,) or bias.data.shape != (C,):
        raise DimensionError("layer_norm gain/bias must have shape (C,)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = _make(xh * gain.data + bias.data, (x, gain, bias))
    if out.requires_grad:
        def bw(g):
            if bias.requires_grad:
                bias._accum_own(g.reshape(-1, C).sum(axis=0))
            if gain.requires_grad:
                gain._accum_own((g * xh).reshape(-1, C).sum(axis=0))
            if x.requires_grad:
                gx = g * gain.data
                x._accum_own(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                    - xh * (gx * xh).mean(axis=-1, keepdims=True)))
        out._bw = bw
    return out
