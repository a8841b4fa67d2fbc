"""A small reverse-mode tape over numpy arrays.

Operations on :class:`Tensor` values are recorded on the innermost active
:class:`Tape` whenever at least one input requires a gradient. Nodes are
appended in execution order, which is already a topological order, so the
backward pass is a single reversed sweep.

>>> with Tape() as tape:
...     x = Tensor(3.0, requires_grad=True)
...     y = x * x
...     tape.backward(y)
>>> float(x.grad)
6.0
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import NumericError, StructuralError, UsageError

_ACTIVE: list["Tape"] = []


class Tensor:
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable] = None
        self._tape: Optional[Tape] = None
        self._index = -1

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return f"Tensor({self.value!r}, op={self.op})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __neg__ = lambda a: neg(a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Records nodes while active; ``backward`` fills ``.grad`` on leaves."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self.check_finite = check_finite

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def _record(self, node: Tensor) -> None:
        node._tape = self
        node._index = len(self.nodes)
        self.nodes.append(node)
        for p in node._parents:
            if p.requires_grad and p._tape is None and id(p) not in self._leaf_ids:
                self._leaf_ids.add(id(p))
                self.leaves.append(p)
        if self.check_finite and not np.all(np.isfinite(node.value)):
            raise NumericError(f"non-finite value at node {node._index} ({node.op})", index=node._index)

    def backward(self, output: Tensor, adjoint=None) -> None:
        if not isinstance(output, Tensor) or output._tape is not self:
            raise UsageError("backward called on a tensor that was not produced on this tape")
        if adjoint is None:
            if output.value.size != 1:
                raise UsageError("an explicit adjoint is required for non-scalar outputs")
            adjoint = np.ones_like(output.value)
        adjoint = np.asarray(adjoint, dtype=np.float64)
        if adjoint.shape != output.shape:
            raise StructuralError(f"adjoint shape {adjoint.shape} != output shape {output.shape}")
        for leaf in self.leaves:
            leaf.grad = None
        adj: dict[int, np.ndarray] = {output._index: adjoint}
        for node in reversed(self.nodes[: output._index + 1]):
            g = adj.pop(node._index, None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is self:
                    prev = adj.get(parent._index)
                    adj[parent._index] = pg if prev is None else prev + pg
                else:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._vjp = vjp
        tape._record(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    g = g.sum(axis=tuple(range(g.ndim - len(shape)))) if g.ndim > len(shape) else g
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


# ---------------------------------------------------------------- nonlinearities

def _sigmoid(x):
    out = np.tanh(0.5 * x)
    out += 1.0
    out *= 0.5
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.value)
    return _node(a.value * s, (a,), lambda g: (g * s * (1.0 + a.value * (1.0 - s)),), "silu")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _node(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _node(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------- reductions and shape

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(np.broadcast_to(a.value, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.value for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def getitem(a, idx) -> Tensor:
    """Indexing (basic or integer-array); the adjoint scatters with ``np.add.at``."""
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.value[idx], (a,), vjp, "gather")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise StructuralError("matmul needs operands with ndim >= 2")

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.value @ b.value, (a, b), vjp, "matmul")


def dense(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` with any number of leading axes."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise StructuralError(f"dense: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    parents = (x, w) if b is None else (x, w, as_tensor(b))
    lead = x.shape[:-1]
    x2 = x.value.reshape(-1, x.shape[-1])
    out = x2 @ w.value
    if b is not None:
        out += parents[2].value
    out = out.reshape(lead + (w.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.value.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(out, parents, vjp, "dense")


def mean_center(a, axis: int = -2) -> Tensor:
    """Subtract the mean along ``axis`` (the centre of mass for ``(..., N, d)`` clouds)."""
    a = as_tensor(a)
    return _node(a.value - a.value.mean(axis=axis, keepdims=True), (a,),
                 lambda g: (g - g.mean(axis=axis, keepdims=True),), "mean_center")


def pairwise_diff(a) -> Tensor:
    """``(..., N, d) -> (..., N, N, d)`` with entry ``[i, j] = x_i - x_j``."""
    a = as_tensor(a)
    v = a.value
    out = v[..., :, None, :] - v[..., None, :, :]
    return _node(out, (a,), lambda g: (g.sum(axis=-2) - g.sum(axis=-3),), "pairwise_diff")


def pairwise_sqdist(a) -> Tensor:
    return sum_(square(pairwise_diff(a)), axis=-1)


def pairwise_distance(a, eps: float = 1e-12) -> Tensor:
    """Euclidean distances ``(..., N, N)``; the diagonal is smoothed by ``eps``."""
    return sqrt(pairwise_sqdist(a) + eps)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
