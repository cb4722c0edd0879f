"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when gradients are enabled and at
least one input requires them, remembers the inputs it was computed from and a
closure that maps the output gradient to input gradients. Calling
:meth:`Tensor.backward` builds a :class:`Tape` (the reachable graph in
topological order) and replays the closures in reverse.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

_GRAD_ENABLED = True
_CHECK_FINITE = False


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf while checking is enabled."""

    def __init__(self, op: str, shape: tuple):
        super().__init__(f"non-finite values produced by op '{op}' with shape {shape}")
        self.op = op
        self.shape = shape


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def check_finite(enabled: bool = True):
    """Raise :class:`NonFiniteError` from the first op that emits NaN/Inf."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "retain_grad")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn = None
        self.op = op
        self.retain_grad = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward ---------------------------------------------------------
    def backward(self, grad=None) -> "Tape":
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        tape = Tape.from_root(self)
        tape.backward(self, np.asarray(grad, dtype=self.data.dtype))
        return tape

    # -- operators --------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Tape:
    """Nodes reachable from a root, in topological (forward) order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order = []
        seen = set()
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
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: Tensor, grad: np.ndarray) -> None:
        root.grad = grad if root.grad is None else root.grad + grad
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
            if not node.retain_grad and node is not root:
                node.grad = None

    def first_nonfinite(self):
        """Return the earliest node in forward order holding NaN/Inf, or None."""
        for node in self.nodes:
            if not np.all(np.isfinite(node.data)):
                return node
        return None


# ---------------------------------------------------------------------------
# graph construction helpers

def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap ``x``; constants take the dtype of ``like`` so float32 graphs stay float32."""
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if _CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(op, out.shape)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward, "div")


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_node(xd ** exponent, (x,),
                     lambda g: (g * exponent * xd ** (exponent - 1),), "pow")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_node(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if np.any(xd <= 0):
        raise ValueError("log of non-positive value; floor the input first")
    return make_node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    if x.dtype == np.float32:
        # fast path; loses relative precision only far in the negative tail
        out = 0.5 + 0.5 * np.tanh(0.5 * x.data)
    else:
        out = expit(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_node(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def tabs(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return make_node(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def maximum(x, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)`` for a scalar floor."""
    x = as_tensor(x)
    mask = x.data > floor
    return make_node(np.where(mask, x.data, floor).astype(x.dtype), (x,),
                     lambda g: (g * mask,), "maximum")


# ---------------------------------------------------------------------------
# reductions and shape ops

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                     lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return make_node(x.data[index], (x,), backward, "getitem")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                     backward, "concat")


def pad1d(x, left: int, right: int, mode: str = "constant") -> Tensor:
    """Pad the last axis. ``mode`` is one of constant (zeros), reflect, edge."""
    x = as_tensor(x)
    n = x.shape[-1]
    if mode == "reflect" and (left >= n or right >= n):
        raise ValueError("reflection padding must be shorter than the input")
    width = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    np_mode = {"constant": "constant", "reflect": "reflect", "edge": "edge"}[mode]
    out = np.pad(x.data, width, mode=np_mode)

    def backward(g):
        gx = g[..., left:left + n].copy()
        if mode == "reflect":
            if left:
                gx[..., 1:left + 1] += g[..., :left][..., ::-1]
            if right:
                gx[..., n - right - 1:n - 1] += g[..., left + n:][..., ::-1]
        elif mode == "edge":
            if left:
                gx[..., 0] += g[..., :left].sum(-1)
            if right:
                gx[..., -1] += g[..., left + n:].sum(-1)
        return (gx,)

    return make_node(out, (x,), backward, f"pad_{mode}")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad @ bd, (a, b), backward, "matmul")
