"""Dense float64 tensors with reverse-mode automatic differentiation.

The tape is define-by-run: every operation records vector-Jacobian closures
linking its output to the inputs that require gradients, and the graph is
rebuilt from scratch on every forward pass. Backpropagation walks the nodes
in reverse topological order. The primitive set is deliberately small so
that each vjp can be audited by hand; convolutions are expressed upstream
as patch extraction (reshape/transpose) followed by matmul.

Any operation that would produce a NaN or Inf raises NumericError; the tape
never holds a non-finite value.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, NumericError, StructuralError
from .params import ParamSet

Array = np.ndarray


class Tensor:
    """One node on the tape: an f64 array plus links to its inputs.

    `_parents` holds (input, vjp) pairs only for inputs that require grad;
    a node with no tracked parents is a leaf of the differentiable graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents")

    def __init__(self, data, requires_grad: bool = False, _parents=()):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite value entering the tape")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple = _parents if self.requires_grad else ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _node(data: Array, parents: Sequence[tuple[Tensor, Callable[[Array], Array]]]) -> Tensor:
    tracked = tuple((p, f) for p, f in parents if p.requires_grad)
    return Tensor(data, requires_grad=bool(tracked), _parents=tracked)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over axes introduced or stretched by broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    stretched = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if stretched:
        g = g.sum(axis=stretched, keepdims=True)
    return g.reshape(shape)


# elementwise arithmetic ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data
    return _node(out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data
    return _node(out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ])


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, [(a, lambda g: -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data
    return _node(out, [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise StructuralError(
            f"matmul needs rank-2 operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise StructuralError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _node(out, [
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ])


# nonlinearities -------------------------------------------------------------


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, [(x, lambda g: g * (1.0 - y * y))])


def softplus(x: Tensor) -> Tensor:
    y = np.logaddexp(0.0, x.data)
    s = expit(x.data)
    return _node(y, [(x, lambda g: g * s)])


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _node(y, [(x, lambda g: g * y * (1.0 - y))])


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    mask = x.data > 0.0
    return _node(y, [(x, lambda g: g * mask)])


def huber(x: Tensor, delta: float) -> Tensor:
    """Elementwise Huber penalty: quadratic within |x| <= delta, linear outside."""
    if delta <= 0:
        raise ContractError("huber delta must be positive")
    ax = np.abs(x.data)
    y = np.where(ax <= delta, 0.5 * x.data * x.data, delta * (ax - 0.5 * delta))
    return _node(y, [(x, lambda g: g * np.clip(x.data, -delta, delta))])


# reductions -----------------------------------------------------------------


def _expand_reduced(g: Array, shape: tuple[int, ...], axis) -> Array:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    kept = list(shape)
    for a in axes:
        kept[a] = 1
    return np.broadcast_to(g.reshape(kept), shape)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)
    return _node(out, [(x, lambda g: _expand_reduced(g, x.data.shape, axis))])


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    out = x.data.mean(axis=axis)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for a in axes:
            count *= x.data.shape[a]
    return _node(out, [(x, lambda g: _expand_reduced(g, x.data.shape, axis) / count)])


def sum_squares(x: Tensor, axis=None) -> Tensor:
    """Sum of squared entries (squared Frobenius norm when axis is None)."""
    out = (x.data * x.data).sum(axis=axis)
    return _node(out, [(x, lambda g: 2.0 * x.data * _expand_reduced(g, x.data.shape, axis))])


# structure ------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _node(out, [(x, lambda g: g.reshape(x.data.shape))])


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _node(out, [(x, lambda g: g.transpose(inv))])


def slice_(x: Tensor, key) -> Tensor:
    """Rectangular slice; `key` is a tuple of python slices (no strides)."""
    key = key if isinstance(key, tuple) else (key,)
    for k in key:
        if not isinstance(k, slice) or k.step not in (None, 1):
            raise ContractError("slice_ accepts contiguous slices only")
    out = x.data[key]

    def back(g: Array) -> Array:
        z = np.zeros_like(x.data)
        z[key] = g
        return z

    return _node(out, [(x, back)])


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_lift(x) for x in xs]
    if not xs:
        raise ContractError("concat of zero tensors")
    out = np.concatenate([x.data for x in xs], axis=axis)
    parents = []
    offset = 0
    for x in xs:
        width = x.data.shape[axis]
        lo, hi = offset, offset + width

        def back(g: Array, lo=lo, hi=hi) -> Array:
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        parents.append((x, back))
        offset += width
    return _node(out, parents)


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape).copy()
    return _node(out, [(x, lambda g: _unbroadcast(g, x.data.shape))])


def take_rows(table: Tensor, idx) -> Tensor:
    """Row gather (embedding lookup). Gradient scatter-adds duplicate rows."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise StructuralError("take_rows expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ContractError("take_rows index out of range")
    out = table.data[idx]

    def back(g: Array) -> Array:
        z = np.zeros_like(table.data)
        np.add.at(z, idx, g)
        return z

    return _node(out, [(table, back)])


# backward pass --------------------------------------------------------------


def _toposort(out: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen = {id(out)}
    stack: list[tuple[Tensor, int]] = [(out, 0)]
    while stack:
        node, i = stack.pop()
        parents = node._parents
        if i < len(parents):
            stack.append((node, i + 1))
            p = parents[i][0]
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, 0))
        else:
            order.append(node)
    return order  # inputs before consumers; `out` is last


def backward(out: Tensor) -> None:
    """Accumulate d(out)/d(node) into `.grad` of every reachable node."""
    if out.data.shape != ():
        raise ContractError(f"backward needs a scalar output, got shape {out.data.shape}")
    order = _toposort(out)
    for node in order:
        node.grad = None
    out.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node._parents:
            pg = vjp(g)
            parent.grad = pg if parent.grad is None else parent.grad + pg


def grad(out: Tensor, leaves: Mapping[str, Tensor]) -> dict[str, Array]:
    """Backward pass returning one gradient array per named leaf.

    Leaves not reached by the tape get zero gradients of matching shape.
    """
    backward(out)
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in leaves.items()
    }


# graph-level interface ------------------------------------------------------


class Graph:
    """A reusable forward computation: named input tensors to one output.

    The builder runs once per call, laying a fresh tape each time.
    """

    def __init__(self, build: Callable[[dict[str, Tensor]], Tensor]):
        self.build = build

    def trace(self, inputs, requires_grad: bool) -> tuple[Tensor, dict[str, Tensor]]:
        leaves = {k: Tensor(v, requires_grad=requires_grad) for k, v in inputs.items()}
        out = self.build(leaves)
        if not isinstance(out, Tensor):
            raise ContractError("graph builder must return a Tensor")
        return out, leaves


def evaluate(graph: Graph, inputs) -> Array:
    """Run the forward pass; deterministic for identical inputs."""
    out, _ = graph.trace(inputs, requires_grad=False)
    return out.data


def gradient(graph: Graph, inputs, wrt: Sequence[str]) -> ParamSet:
    """Gradient of a scalar-valued graph with respect to named input segments."""
    out, leaves = graph.trace(inputs, requires_grad=True)
    missing = [name for name in wrt if name not in leaves]
    if missing:
        raise StructuralError(f"unknown segments requested: {missing}")
    grads = grad(out, leaves)
    return ParamSet({name: grads[name] for name in wrt})
