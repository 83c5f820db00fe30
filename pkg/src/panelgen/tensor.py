"""Dense row-major tensors with reverse-mode automatic differentiation.

Everything in this package computes on `Tensor`, a thin wrapper around a
numpy array plus a recorded operation graph. Ops register a backward
closure on the output; `backward()` replays the chain rule over the graph
in reverse topological order. Reductions use numpy's fixed left-to-right
(pairwise) order, so replaying the same computation is bit-identical.

Only float32 and float64 are supported. Mixed-dtype arithmetic is an
error rather than a silent upcast: training runs at 32-bit while gradient
oracles run at 64-bit, and accidental mixing would invalidate both.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

Number = Union[int, float]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (e.g. backward from a non-scalar)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        want = np.dtype(dtype)
        if want.type not in FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {want}; use float32 or float64")
        return arr.astype(want, copy=False)
    if arr.dtype.type in FLOAT_DTYPES:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A dense array plus optional gradient buffer and graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"

    # -- constructors ------------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple["Tensor", ...], op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = parents if out.requires_grad else ()
        out._backward = None
        out.op = op
        return out

    # -- basic properties --------------------------------------------------

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy)."""
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self.op!r})"

    # -- gradient accumulation ---------------------------------------------

    def _accum(self, g: np.ndarray, owned: bool) -> None:
        # `owned` means g is a fresh buffer this op will not reuse, so the
        # first accumulation may take it by reference instead of copying.
        if self.grad is None:
            self.grad = g if owned else g.copy()
        else:
            np.add(self.grad, g, out=self.grad)

    def backward(self) -> None:
        """Populate gradients of every requires-grad ancestor of this scalar."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return  # detached root: nothing to do
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS post-order; each recorded node visited exactly once.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


# -- broadcasting helpers ----------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (the inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    """Wrap plain numbers/arrays as constants, preserving operand order."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.data.dtype != b.data.dtype:
            raise TypeError(f"mixed dtypes {a.data.dtype} and {b.data.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    raise TypeError("at least one operand must be a Tensor")


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = Tensor._from_op(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape), owned=False)
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape), owned=False)
        out._backward = bwd
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return add(a, neg(b))


def neg(a: Tensor) -> Tensor:
    out = Tensor._from_op(-a.data, (a,), "neg")
    if out.requires_grad:
        out._backward = lambda g: a._accum(-g, owned=True)
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = Tensor._from_op(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape), owned=True)
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape), owned=True)
        out._backward = bwd
    return out


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = Tensor._from_op(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.data.shape), owned=True)
            if b.requires_grad:
                b._accum(_unbroadcast(-g * out.data / b.data, b.data.shape), owned=True)
        out._backward = bwd
    return out


def power(a: Tensor, p: float) -> Tensor:
    out = Tensor._from_op(a.data ** p, (a,), "pow")
    if out.requires_grad:
        out._backward = lambda g: a._accum(g * p * a.data ** (p - 1), owned=True)
    return out


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor._from_op(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: a._accum(g.reshape(a.data.shape), owned=False)
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor._from_op(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        inv = tuple(np.argsort(axes))
        out._backward = lambda g: a._accum(np.transpose(g, inv), owned=False)
    return out


def getitem(a: Tensor, key) -> Tensor:
    out = Tensor._from_op(a.data[key], (a,), "getitem")
    if out.requires_grad:
        def bwd(g):
            full = np.zeros_like(a.data)
            full[key] += g
            a._accum(full, owned=True)
        out._backward = bwd
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def bwd(g):
            idx = [slice(None)] * g.ndim
            for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx[axis] = slice(start, stop)
                    t._accum(g[tuple(idx)], owned=False)
        out._backward = bwd
    return out


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape), owned=False)
        out._backward = bwd
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor._from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean")
    if out.requires_grad:
        count = a.data.size // out.data.size
        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g / count, a.data.shape), owned=False)
        out._backward = bwd
    return out


# -- matmul ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul needs two Tensors")
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"mixed dtypes {a.data.dtype} and {b.data.dtype}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError("matmul with 2-D left and batched right operand is unsupported")

    out = Tensor._from_op(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accum(np.matmul(g, np.swapaxes(b.data, -1, -2)), owned=True)
            if b.requires_grad:
                if b.ndim == 2 and a.ndim > 2:
                    # weight of a batched linear: one full-size GEMM
                    k = a.shape[-1]
                    n = g.shape[-1]
                    gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
                else:
                    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accum(gb, owned=True)
        out._backward = bwd
    return out


# -- fused neural-net primitives ---------------------------------------------


def softmax(x: Tensor, axis: int = -1, additive_mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stabilized softmax; `additive_mask` is added to the logits
    before normalization (use large negative values to exclude positions)."""
    if additive_mask is not None:
        z = x.data + additive_mask.astype(x.data.dtype, copy=False)
    else:
        z = x.data
    m = z.max(axis=axis, keepdims=True)
    if additive_mask is not None:
        np.subtract(z, m, out=z)
        e = np.exp(z, out=z)
    else:
        e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    y = e / s
    out = Tensor._from_op(y, (x,), "softmax")
    if out.requires_grad:
        def bwd(g):
            gy = g * y
            dx = gy - y * gy.sum(axis=axis, keepdims=True)
            x._accum(dx, owned=True)
        out._backward = bwd
    return out


def layer_norm(x: Tensor, gain: Optional[Tensor], bias: Optional[Tensor],
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply the
    optional per-feature affine."""
    d = x.shape[-1]
    if gain is not None and gain.shape != (d,):
        raise ShapeError(f"gain shape {gain.shape} does not match feature size {d}")
    if bias is not None and bias.shape != (d,):
        raise ShapeError(f"bias shape {bias.shape} does not match feature size {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    parents = tuple(t for t in (x, gain, bias) if t is not None)
    out = Tensor._from_op(y, parents, "layer_norm")
    if out.requires_grad:
        def bwd(g):
            gx = g * gain.data if gain is not None else g
            if x.requires_grad:
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                x._accum(inv * (gx - m1 - xhat * m2), owned=True)
            if gain is not None and gain.requires_grad:
                gain._accum((g * xhat).reshape(-1, d).sum(axis=0), owned=True)
            if bias is not None and bias.requires_grad:
                bias._accum(g.reshape(-1, d).sum(axis=0), owned=True)
        out._backward = bwd
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd * xd * xd)
    t = np.tanh(inner)
    out = Tensor._from_op(0.5 * xd * (1.0 + t), (x,), "gelu")
    if out.requires_grad:
        def bwd(g):
            sech2 = 1.0 - t * t
            dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
            x._accum(g * (0.5 * (1.0 + t) + 0.5 * xd * sech2 * dinner), owned=True)
        out._backward = bwd
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from a 2-D table; gradient scatter-adds into used rows."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range for table with {table.shape[0]} rows")
    out = Tensor._from_op(table.data[ids], (table,), "embedding")
    if out.requires_grad:
        def bwd(g):
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table._accum(full, owned=True)
        out._backward = bwd
    return out


# -- operator sugar ----------------------------------------------------------


def _promote(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.data.dtype))


Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(self, other)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(self, other)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__sub__ = lambda self, other: add(self, neg(_promote(other, self)))
Tensor.__rsub__ = lambda self, other: add(_promote(other, self), neg(self))
Tensor.__truediv__ = lambda self, other: div(self, _promote(other, self))
Tensor.__rtruediv__ = lambda self, other: div(_promote(other, self), self)
Tensor.__pow__ = lambda self, p: power(self, p)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.__getitem__ = lambda self, key: getitem(self, key)
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
Tensor.transpose = lambda self, axes: transpose(self, axes)
Tensor.sum = lambda self, axis=None, keepdims=False: tsum(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: tmean(self, axis, keepdims)
