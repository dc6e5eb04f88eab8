"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded on it (only
when at least one input requires a gradient).  Outside any tape the ops are
plain numpy computations, which is what evaluation code relies on for speed.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> backward(y, tape)
    >>> float(x.grad)
    6.0
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "add",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "tanh",
    "clamp_min",
    "relu",
    "exp",
    "sum",
    "mean",
    "log_softmax",
    "embedding_lookup",
    "concat",
    "pick",
    "backward",
    "zero_grad",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A float64 array that optionally tracks gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass(eq=False)
class _Node:
    inputs: tuple[Tensor, ...]
    out: Tensor
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations for one forward pass.

    Nodes are appended in execution order, which is a topological order of
    the computation graph by construction.
    """

    _active: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._node = None
    out.requires_grad = False
    if Tape._active and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(inputs, out, grad_fn)
        out._node = node
        Tape._active[-1].nodes.append(node)
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a vector matching ``a``'s last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    a_shape, b_shape = a.shape, b.shape
    if a_shape != b_shape and not (len(b_shape) == 1 and a_shape and b_shape[0] == a_shape[-1]):
        raise ShapeError(f"add: incompatible shapes {a_shape} and {b_shape}")

    def grad_fn(g):
        return g, _sum_to_shape(g, b_shape)

    return _record(a.data + b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shaped tensors, or scaling by a float."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        if np.ndim(b) == 0:
            c = float(b)

            def grad_scalar(g):
                return (g * c,)

            return _record(a.data * c, (a,), grad_scalar)
        b = Tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g * bd, g * ad

    return _record(ad * bd, (a, b), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``[..., m, k]``; ``b`` is either ``[k, n]`` (shared across the
    leading axes of ``a``) or ``[..., k, n]`` with identical leading axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul needs at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} x {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(ad @ bd, (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""

    def grad_fn(g):
        return (np.swapaxes(g, -1, -2),)

    return _record(np.swapaxes(a.data, -1, -2), (a,), grad_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _record(a.data.reshape(shape), (a,), grad_fn)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _record(out, (a,), grad_fn)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0

    def grad_fn(g):
        return (g * pos,)

    return _record(np.where(pos, a.data, 0.0), (a,), grad_fn)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """``max(a, floor)``; clamped entries pass no gradient."""
    keep = a.data >= floor

    def grad_fn(g):
        return (g * keep,)

    return _record(np.where(keep, a.data, floor), (a,), grad_fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return _record(out, (a,), grad_fn)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:

        def grad_all(g):
            return (np.broadcast_to(g, shape).copy(),)

        return _record(np.asarray(a.data.sum()), (a,), grad_all)
    ax = axis % a.data.ndim

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _record(a.data.sum(axis=ax), (a,), grad_fn)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / count)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis with max subtraction."""
    if a.data.ndim == 0 or a.shape[-1] < 1:
        raise ShapeError("log_softmax needs a non-empty last axis")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record(out, (a,), grad_fn)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Rows of a ``[V, d]`` table gathered by an integer index array."""
    idx = np.asarray(indices, dtype=np.int64)
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"embedding index out of range [0, {vocab})")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(table.data[idx], (table,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    ax = axis % tensors[0].data.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tensors, grad_fn)


def pick(a: Tensor, indices) -> Tensor:
    """``a[..., indices]`` along the last axis: shape ``a.shape[:-1]``."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"pick: index shape {idx.shape} vs {a.shape}")
    expanded = idx[..., None]

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, expanded, g[..., None], axis=-1)
        return (ga,)

    return _record(np.take_along_axis(a.data, expanded, axis=-1)[..., 0], (a,), grad_fn)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Calling twice without :func:`zero_grad` adds the gradients again.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.is_leaf:
        if loss.requires_grad:
            loss.grad = np.ones(()) if loss.grad is None else loss.grad + 1.0
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.grad_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                pending[key] = pending[key] + gi if key in pending else gi


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
