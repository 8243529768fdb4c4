"""Reverse-mode automatic differentiation over dense numpy arrays.

The operation set is deliberately small: just enough to run a
patch-embedding transformer, its two linear heads, and the losses that
train them. Each operation computes its forward value eagerly and, when
gradients are required, attaches a closure holding the local backward
rule. ``backward()`` on a scalar replays those closures in reverse
topological order, accumulating into ``grad`` buffers.

Shape discipline is strict: the only implicit broadcast is a 1-D bias
added over the last axis. Anything wider (positional embeddings, the
class token) goes through the explicit ``broadcast_to`` op so every
backward rule stays auditable.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)
_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

_node_counter = itertools.count()
_grad_enabled = True
_blas_limiter = None


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def set_deterministic(on: bool) -> None:
    """Pin BLAS pools to one thread so reductions run sequentially.

    numpy kernels are already run-to-run deterministic for a fixed thread
    count; this removes the thread count from the equation entirely.
    """
    global _blas_limiter
    if on and _blas_limiter is None:
        from threadpoolctl import threadpool_limits

        _blas_limiter = threadpool_limits(limits=1)
    elif not on and _blas_limiter is not None:
        _blas_limiter.unregister()
        _blas_limiter = None


class Tensor:
    """A dense array plus an optional slot in a computation record.

    ``data`` is a float32 or float64 numpy array. Leaves created with
    ``requires_grad=True`` get a zero ``grad`` buffer immediately, so a
    leaf untouched by ``backward()`` reads as all-zero gradient rather
    than as missing. Interior nodes allocate their buffer lazily during
    the backward sweep.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_rule", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.node_id = next(_node_counter)
        self._parents: tuple[Tensor, ...] = ()
        self._rule = None
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    # -- graph plumbing -------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every differentiable tensor reachable from here.

        Only valid on scalars, and only once per computation record; a
        second call on the same record is a contract error.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        if self._spent:
            raise ContractError("backward() was already called on this computation record")
        if not self.requires_grad:
            self._spent = True
            return
        order = toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._rule is not None:
                node._rule(node.grad)
        self._spent = True

    # -- operator sugar --------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def broadcast_to(self, shape: Sequence[int]) -> "Tensor":
        return broadcast_to(self, shape)

    def take(self, index: int, axis: int) -> "Tensor":
        return take(self, index, axis)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def toposort(root: Tensor) -> list[Tensor]:
    """Topologically ordered computation record ending at ``root``.

    Every node's inputs appear before the node itself; this is the order
    whose reversal the backward sweep replays.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._rule = rule
    return out


def _check_same_dtype(*ts: Tensor) -> None:
    dtypes = {t.dtype for t in ts}
    if len(dtypes) > 1:
        raise ContractError(f"mixed dtypes in one operation: {sorted(map(str, dtypes))}")


def _reduce_leading(g: np.ndarray, ndim_keep: int) -> np.ndarray:
    axes = tuple(range(g.ndim - ndim_keep))
    return g.sum(axis=axes) if axes else g


# -- arithmetic -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; the one permitted broadcast is a 1-D bias over the last axis."""
    _check_same_dtype(a, b)
    if a.shape == b.shape:
        def rule(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)
        return _from_op(a.data + b.data, (a, b), rule)
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        def rule(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(_reduce_leading(g, 1))
        return _from_op(a.data + b.data, (a, b), rule)
    raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}")

    def rule(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _from_op(a.data - b.data, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    def rule(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _from_op(-a.data, (a,), rule)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with an equal-shape tensor or a python scalar."""
    if isinstance(b, Tensor):
        _check_same_dtype(a, b)
        if a.shape != b.shape:
            raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")

        def rule(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)

        return _from_op(a.data * b.data, (a, b), rule)

    scalar = a.dtype.type(b)

    def rule(g):
        if a.requires_grad:
            a._accumulate(g * scalar)

    return _from_op(a.data * scalar, (a,), rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Accepted shapes: (..., m, k) @ (k, n) with the weight gradient summed
    over the leading axes, (..., m, k) @ (..., k, n) with identical
    leading axes, and the vector case (k,) @ (k, n).
    """
    _check_same_dtype(a, b)
    ad, bd = a.data, b.data
    if ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")

        def rule(g):
            if a.requires_grad:
                a._accumulate(bd @ g)
            if b.requires_grad:
                b._accumulate(np.outer(ad, g))

        return _from_op(ad @ bd, (a, b), rule)

    if ad.ndim >= 2 and bd.ndim == 2:
        if ad.shape[-1] != bd.shape[0]:
            raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")

        def rule(g):
            if a.requires_grad:
                a._accumulate(g @ bd.T)
            if b.requires_grad:
                k = ad.shape[-1]
                n = g.shape[-1]
                b._accumulate(ad.reshape(-1, k).T @ g.reshape(-1, n))

        return _from_op(ad @ bd, (a, b), rule)

    if ad.ndim == bd.ndim >= 3 and ad.shape[:-2] == bd.shape[:-2]:
        if ad.shape[-1] != bd.shape[-2]:
            raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")

        def rule(g):
            if a.requires_grad:
                a._accumulate(g @ bd.swapaxes(-1, -2))
            if b.requires_grad:
                b._accumulate(ad.swapaxes(-1, -2) @ g)

        return _from_op(ad @ bd, (a, b), rule)

    raise ShapeError(f"unsupported matmul shapes: {a.shape} @ {b.shape}")


# -- structural ops -------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def rule(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _from_op(data, (a,), rule)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} are not a permutation for shape {a.shape}")
    inverse = tuple(np.argsort(axes))

    def rule(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inverse))

    return _from_op(a.data.transpose(axes), (a,), rule)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Prepend axes and tile; the gradient sums back over the new axes."""
    shape = tuple(shape)
    if len(shape) <= a.ndim or shape[len(shape) - a.ndim:] != a.shape:
        raise ShapeError(f"broadcast_to only prepends axes: {a.shape} -> {shape}")
    added = len(shape) - a.ndim

    def rule(g):
        if a.requires_grad:
            a._accumulate(g.sum(axis=tuple(range(added))))

    return _from_op(np.broadcast_to(a.data, shape).copy(), (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    _check_same_dtype(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def rule(g):
        pieces = np.split(g, offsets, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    return _from_op(data, tuple(tensors), rule)


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (the axis disappears)."""
    if not -a.shape[axis] <= index < a.shape[axis]:
        raise ShapeError(f"index {index} out of range for axis {axis} of shape {a.shape}")
    slicer = [slice(None)] * a.ndim
    slicer[axis] = index
    slicer = tuple(slicer)

    def rule(g):
        if a.requires_grad:
            scatter = np.zeros_like(a.data)
            scatter[slicer] = g
            a._accumulate(scatter)

    return _from_op(a.data[slicer].copy(), (a,), rule)


# -- reductions -----------------------------------------------------------


def _unreduce(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def rule(g):
        if a.requires_grad:
            a._accumulate(_unreduce(g, a.shape, axis, keepdims))

    return _from_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), rule)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    inv = a.dtype.type(1.0 / count)

    def rule(g):
        if a.requires_grad:
            a._accumulate(_unreduce(g * inv, a.shape, axis, keepdims))

    return _from_op(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), rule)


# -- nonlinearities -------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; each slice along ``axis`` sums to one."""
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    y = ex / np.sum(ex, axis=axis, keepdims=True)

    def rule(g):
        if a.requires_grad:
            inner = np.sum(g * y, axis=axis, keepdims=True)
            a._accumulate(y * (g - inner))

    return _from_op(y, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse

    def rule(g):
        if a.requires_grad:
            soft = np.exp(y)
            a._accumulate(g - soft * np.sum(g, axis=axis, keepdims=True))

    return _from_op(y, (a,), rule)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then apply affine.

    ``eps`` sits inside the square root, so a constant slice maps to the
    bias instead of dividing by zero.
    """
    _check_same_dtype(a, gain, bias)
    width = a.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {width}"
        )
    mu = np.mean(a.data, axis=-1, keepdims=True)
    centered = a.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.dtype.type(eps))
    xhat = centered * inv
    y = xhat * gain.data + bias.data

    def rule(g):
        if gain.requires_grad:
            gain._accumulate(_reduce_leading(g * xhat, 1))
        if bias.requires_grad:
            bias._accumulate(_reduce_leading(g, 1))
        if a.requires_grad:
            dxhat = g * gain.data
            dvar = np.sum(dxhat * centered, axis=-1, keepdims=True) * (-0.5) * inv**3
            dmu = np.sum(-dxhat * inv, axis=-1, keepdims=True) + dvar * np.mean(
                -2.0 * centered, axis=-1, keepdims=True
            )
            a._accumulate(dxhat * inv + dvar * 2.0 * centered / width + dmu / width)

    return _from_op(y, (a, gain, bias), rule)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x), no tanh shortcut."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * a.dtype.type(_INV_SQRT2)))
    y = x * cdf

    def rule(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * a.dtype.type(_INV_SQRT2PI)
            a._accumulate(g * (cdf + x * pdf))

    return _from_op(y, (a,), rule)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
