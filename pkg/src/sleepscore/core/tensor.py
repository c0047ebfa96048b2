"""Reverse-mode automatic differentiation over dense numpy arrays.

A `Tensor` wraps a float32 (or float64) ndarray and records the operation
that produced it. Calling `backward()` on a scalar result walks the graph
in reverse topological order and accumulates gradients into every tensor
with `requires_grad=True`. Gradient accumulation is a plain sequential
reduction, so results are deterministic for a fixed thread count.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from ..errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float32

# When enabled, every op output is checked for NaN/Inf and raises NumericError.
# Off by default: the check costs a full pass over each array.
_CHECK_FINITE = False


def set_check_finite(flag: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


def _check(data: np.ndarray, opname: str) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {opname}")


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """A node in the autodiff graph: value, optional gradient, provenance."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 dtype: Optional[np.dtype] = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, " \
               f"requires_grad={self.requires_grad})"

    # -- graph construction ------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None,
                 retain: Iterable["Tensor"] = ()) -> None:
        """Backpropagate from this tensor.

        `grad` defaults to ones (use only on scalar outputs). Gradients of
        intermediate nodes are freed as soon as they are consumed unless the
        node is a leaf or listed in `retain`.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient requires "
                                 f"a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} does not "
                                 f"match output shape {self.shape}")

        topo = self._toposort()
        keep = set(id(t) for t in retain)
        self.grad = grad.copy() if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents and id(node) not in keep and node is not self:
                node.grad = None

    def _toposort(self) -> list:
        order: list = []
        visited = set()
        stack: list = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    # -- operators -----------------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method aliases ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def _lift(x, ref: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = ref.data.dtype if ref is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(data: np.ndarray, parents: Sequence[Tensor],
            backward: Optional[Callable[[np.ndarray], None]],
            name: str = "op") -> Tensor:
    """Assemble a graph node; used by fused operations in the layer modules."""
    _check(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def accumulate_grad(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Add a gradient contribution to a tensor.

    `fresh=True` promises `g` is newly allocated and owned by the caller,
    allowing it to be adopted without a defensive copy.
    """
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
        fresh = True
    if t.grad is None:
        t.grad = g if fresh else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    data = a.data + b.data

    def backward(g):
        accumulate_grad(a, _unbroadcast(g, a.shape))
        accumulate_grad(b, _unbroadcast(g, b.shape))

    return make_op(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    data = a.data - b.data

    def backward(g):
        accumulate_grad(a, _unbroadcast(g, a.shape))
        accumulate_grad(b, _unbroadcast(-g, b.shape), fresh=True)

    return make_op(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            accumulate_grad(a, _unbroadcast(g * b.data, a.shape), fresh=True)
        if b.requires_grad:
            accumulate_grad(b, _unbroadcast(g * a.data, b.shape), fresh=True)

    return make_op(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            accumulate_grad(a, _unbroadcast(g / b.data, a.shape), fresh=True)
        if b.requires_grad:
            accumulate_grad(b, _unbroadcast(-g * data / b.data, b.shape),
                            fresh=True)

    return make_op(data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        accumulate_grad(a, -g, fresh=True)

    return make_op(-a.data, (a,), backward, "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    data = a.data ** exponent

    def backward(g):
        accumulate_grad(a, g * exponent * a.data ** (exponent - 1.0),
                        fresh=True)

    return make_op(data, (a,), backward, "pow")


# -- transcendental ------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        accumulate_grad(a, g * data, fresh=True)

    return make_op(data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        accumulate_grad(a, g / a.data, fresh=True)

    return make_op(data, (a,), backward, "log")


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        accumulate_grad(a, g * (1.0 - data * data), fresh=True)

    return make_op(data, (a,), backward, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    # Stable on both tails: exp() is only taken of non-positive values.
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g):
        accumulate_grad(a, g * data * (1.0 - data), fresh=True)

    return make_op(data, (a,), backward, "sigmoid")


# -- reductions -----------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        accumulate_grad(a, np.broadcast_to(g, a.shape))

    return make_op(np.asarray(data), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(data.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        accumulate_grad(a, np.broadcast_to(g / count, a.shape))

    return make_op(np.asarray(data), (a,), backward, "mean")


# -- shape manipulation ----------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        accumulate_grad(a, g.reshape(a.shape))

    return make_op(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    data = a.data.transpose(axes)

    def backward(g):
        inv = None if axes is None else np.argsort(axes)
        accumulate_grad(a, g.transpose(inv))

    return make_op(data, (a,), backward, "transpose")


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice, type(None), type(Ellipsis)))
               for p in parts)


def getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]
    basic = _is_basic_index(key)

    def backward(g):
        buf = np.zeros_like(a.data)
        if basic:
            # basic indexing never aliases, so a plain in-place add suffices
            buf[key] += g
        else:
            np.add.at(buf, key, g)
        accumulate_grad(a, buf, fresh=True)

    return make_op(np.asarray(data), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            accumulate_grad(t, piece)

    return make_op(data, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        pieces = np.moveaxis(g, axis, 0)
        for t, piece in zip(tensors, pieces):
            accumulate_grad(t, piece)

    return make_op(data, tensors, backward, "stack")


# -- linear algebra ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires operands with at least 2 dimensions")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            accumulate_grad(a, _unbroadcast(ga, a.shape), fresh=True)
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            accumulate_grad(b, _unbroadcast(gb, b.shape), fresh=True)

    return make_op(data, (a, b), backward, "matmul")


# -- fused nonlinear ops -------------------------------------------------------------

def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(a.data, lo, hi)

    def backward(g):
        mask = (a.data >= lo) & (a.data <= hi)
        accumulate_grad(a, g * mask, fresh=True)

    return make_op(data, (a,), backward, "clamp")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along `axis`."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        accumulate_grad(a, data * (g - dot), fresh=True)

    return make_op(data, (a,), backward, "softmax")
