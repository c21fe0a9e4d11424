"""Tape-based reverse-mode differentiation over numpy arrays.

Every differentiable operation is a :class:`Function` subclass with a numpy
``forward`` and a hand-written ``backward``.  Calling ``Fn.apply`` records the
function on the output tensors; :func:`grad` walks the recorded graph in
reverse topological order.  Functions may return several outputs (the fused
LSTM does), so gradients are accumulated per function output rather than per
tensor object.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An ndarray plus the function that produced it."""

    __slots__ = ("data", "requires_grad", "_fn", "_idx")

    def __init__(self, data, requires_grad: bool = False, fn: "Function | None" = None, idx: int = 0):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = requires_grad
        self._fn = fn
        self._idx = idx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


class Function:
    """Base class for differentiable operations."""

    inputs: tuple[Tensor, ...] = ()
    n_outputs: int = 1

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, *grad_outputs):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs):
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls()
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        multi = isinstance(out, tuple)
        outs = out if multi else (out,)
        fn.n_outputs = len(outs)
        if _GRAD_ENABLED and any(t.requires_grad for t in tensors):
            fn.inputs = tensors
            result = tuple(Tensor(o, True, fn, i) for i, o in enumerate(outs))
        else:
            result = tuple(Tensor(o) for o in outs)
        return result if multi else result[0]


def _topo_order(root: Function) -> list[Function]:
    """Post-order of the graph under ``root``; a node is marked when expanded, not when pushed."""
    order: list[Function] = []
    done: set[int] = set()
    stack: list[tuple[Function, bool]] = [(root, False)]
    while stack:
        fn, expanded = stack.pop()
        if expanded:
            order.append(fn)
            continue
        if id(fn) in done:
            continue
        done.add(id(fn))
        stack.append((fn, True))
        for t in fn.inputs:
            parent = t._fn
            if parent is not None and id(parent) not in done:
                stack.append((parent, False))
    return order


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to leaf tensors ``wrt``.

    Leaves the loss does not depend on receive zero arrays.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaf_grads: dict[int, np.ndarray] = {}
    if loss._fn is None:
        if loss.requires_grad:
            leaf_grads[id(loss)] = np.ones_like(loss.data)
    else:
        out_grads: dict[int, list] = {id(loss._fn): [None] * loss._fn.n_outputs}
        out_grads[id(loss._fn)][loss._idx] = np.ones_like(loss.data)
        for fn in reversed(_topo_order(loss._fn)):
            gouts = out_grads.pop(id(fn), None)
            if gouts is None:
                continue
            gins = fn.backward(*gouts)
            for t, g in zip(fn.inputs, gins):
                if g is None or not t.requires_grad:
                    continue
                if t._fn is None:
                    key = id(t)
                    if key in leaf_grads:
                        leaf_grads[key] = leaf_grads[key] + g
                    else:
                        leaf_grads[key] = g
                else:
                    slots = out_grads.setdefault(id(t._fn), [None] * t._fn.n_outputs)
                    slots[t._idx] = g if slots[t._idx] is None else slots[t._idx] + g
    result = []
    for t in wrt:
        g = leaf_grads.get(id(t))
        result.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype).reshape(t.shape))
    return result


def _zeros_if_none(g, like):
    return np.zeros_like(like) if g is None else g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


class _Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class _Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class _MatMul(Function):
    # (..., k) @ (k, n)
    def forward(self, x, w):
        self.x, self.w = x, w
        return x @ w

    def backward(self, g):
        gx = g @ self.w.T
        k, n = self.w.shape
        gw = self.x.reshape(-1, k).T @ g.reshape(-1, n)
        return gx, gw


class _Relu(Function):
    def forward(self, x):
        self.pos = x > 0
        return np.where(self.pos, x, np.zeros((), dtype=x.dtype))

    def backward(self, g):
        return (g * self.pos,)


class _Tanh(Function):
    def forward(self, x):
        self.y = np.tanh(x)
        return self.y

    def backward(self, g):
        return (g * (1.0 - self.y * self.y),)


class _Sigmoid(Function):
    def forward(self, x):
        self.y = _sigmoid(x)
        return self.y

    def backward(self, g):
        return (g * self.y * (1.0 - self.y),)


class _Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, g):
        return (g / self.x,)


class _Exp(Function):
    def forward(self, x):
        self.y = np.exp(x)
        return self.y

    def backward(self, g):
        return (g * self.y,)


class _Sum(Function):
    def forward(self, x, axis=None):
        self.shape, self.axis = x.shape, axis
        return np.asarray(x.sum(axis=axis))

    def backward(self, g):
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.shape).copy(),)


class _Reshape(Function):
    def forward(self, x, shape=()):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


class _BroadcastTo(Function):
    def forward(self, x, shape=()):
        self.shape = x.shape
        return np.broadcast_to(x, shape).copy()

    def backward(self, g):
        return (_unbroadcast(g, self.shape),)


class _Concat(Function):
    def forward(self, *xs, axis=-1):
        self.axis = axis
        self.sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis)

    def backward(self, g):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=self.axis))


class _TakeRows(Function):
    """Gather along axis 0 with integer indices (embedding lookup, row selection)."""

    def forward(self, x, idx=None):
        self.shape, self.idx = x.shape, idx
        return x[idx]

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        np.add.at(out, self.idx, g)
        return (out,)


class _PickLast(Function):
    """out[r] = x[r, idx[r]] for 2-d x."""

    def forward(self, x, idx=None):
        self.shape, self.idx = x.shape, idx
        return x[np.arange(x.shape[0]), idx]

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        out[np.arange(self.shape[0]), self.idx] = g
        return (out,)


class _Softmax(Function):
    def forward(self, x):
        self.y = softmax_array(x)
        return self.y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


class _LogSoftmax(Function):
    def forward(self, x):
        z = x - x.max(axis=-1, keepdims=True)
        self.y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        return self.y

    def backward(self, g):
        return (g - np.exp(self.y) * g.sum(axis=-1, keepdims=True),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; pick the matching form per sign
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    return np.where(x >= 0, r, e * r)


def softmax_array(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def add(a, b) -> Tensor:
    return _Add.apply(a, b)


def mul(a, b) -> Tensor:
    return _Mul.apply(a, b)


def matmul(x, w) -> Tensor:
    return _MatMul.apply(x, w)


def relu(x) -> Tensor:
    return _Relu.apply(x)


def tanh(x) -> Tensor:
    return _Tanh.apply(x)


def sigmoid(x) -> Tensor:
    return _Sigmoid.apply(x)


def log(x) -> Tensor:
    return _Log.apply(x)


def exp(x) -> Tensor:
    return _Exp.apply(x)


def tsum(x, axis=None) -> Tensor:
    return _Sum.apply(x, axis=axis)


def reshape(x, shape) -> Tensor:
    return _Reshape.apply(x, shape=tuple(shape))


def broadcast_to(x, shape) -> Tensor:
    return _BroadcastTo.apply(x, shape=tuple(shape))


def concat(xs: Iterable, axis: int = -1) -> Tensor:
    return _Concat.apply(*xs, axis=axis)


def take_rows(x, idx) -> Tensor:
    return _TakeRows.apply(x, idx=np.asarray(idx, dtype=np.intp))


def pick(x, idx) -> Tensor:
    return _PickLast.apply(x, idx=np.asarray(idx, dtype=np.intp))


def log_softmax(x) -> Tensor:
    return _LogSoftmax.apply(x)


def softmax_op(x) -> Tensor:
    return _Softmax.apply(x)
