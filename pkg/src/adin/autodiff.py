"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = (x @ w + b).relu().sum()
    grads = tape.gradient(loss, [w, b])

Outside a tape every op is a plain numpy computation, which is what the
evaluation paths use.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

LOG_EPS = 1e-12

_ids = itertools.count()
_active: list["Tape"] = []


@dataclass
class TapeNode:
    id: int
    op: str
    inputs: tuple["Tensor", ...]
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Records every differentiable op executed inside its ``with`` block."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)

    def record(self, node: TapeNode):
        if self.nodes and node.id <= self.nodes[-1].id:
            raise ContractError("tape node ids must increase in creation order")
        self.nodes.append(node)

    def gradient(self, loss: "Tensor", params: Sequence["Tensor"]) -> list[np.ndarray]:
        grads = backward(self, loss)
        return [grads.get(p.id, np.zeros_like(p.data)) for p in params]


def current_tape() -> Tape | None:
    return _active[-1] if _active else None


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"shape must have positive dimensions, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids) if requires_grad else -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # operators -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("only division by a python scalar is supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = current_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    tape.record(TapeNode(out.id, op, inputs, vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep over ``tape``; returns gradients keyed by tensor id.

    The tape is never mutated, so repeated calls give identical results.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.id)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi
    return grads


# elementwise ---------------------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return None
    if b.data.ndim == 1 and a.data.ndim == 2 and b.shape[0] == a.shape[1]:
        return "row"
    if b.size == 1 and b.data.ndim <= 1:
        return "scalar"
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, mode, shape):
    if mode is None:
        return g
    return g.sum(axis=0) if mode == "row" else g.sum().reshape(shape)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.size < b.size:
        a, b = b, a
    mode = _binary_shapes(a, b, "add")
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (g, _unbroadcast(g, mode, b.shape)))


def sub(a, b) -> Tensor:
    return add(a, neg(as_tensor(b)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data * s, "scale", (a,), lambda g: (g * s,))
    if a.size < b.size:
        a, b = b, a
    mode = _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (g * bd, _unbroadcast(g * ad, mode, b.shape)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def log(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log with the argument clamped to ``max(x, eps)``.

    The clamp applies to the backward pass too: d/dx = 1 / max(x, eps).
    """
    safe = np.maximum(a.data, eps)
    return _make(np.log(safe), "log", (a,), lambda g: (g / safe,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, "square", (a,), lambda g: (2.0 * g * ad,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise ``a ** p``; callers keep ``a`` positive for fractional ``p``."""
    ad = a.data
    return _make(ad ** p, "power", (a,), lambda g: (g * p * ad ** (p - 1.0),))


# linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    z = logits.data
    if z.ndim != 2 or z.shape[1] < 2:
        raise DimensionError(f"softmax expects [batch x K>=2], got {z.shape}")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, "softmax", (logits,), vjp)


# reductions and reshaping ---------------------------------------------------

def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _make(np.array(a.data.sum()), "sum", (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=axis)
    return _make(out, "sum", (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate 2-D tensors along the feature axis (or rows with axis=0)."""
    tensors = tuple(tensors)
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [d.shape[axis] for d in datas])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, "concat", tensors, vjp)


def index(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing (row slices, column slices)."""
    out = a.data[idx]
    if out.size == 0:
        raise DimensionError(f"index {idx!r} selects nothing from {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), "index", (a,), vjp)
