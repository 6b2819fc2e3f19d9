"""Reverse-mode differentiation for the fixed model computation graph.

This is not a general autograd system: it provides exactly the operations the
model forward pass needs, each with a hand-derived vector-Jacobian product.
Gradient accumulation is single-writer and runs in a fixed topological order,
so backward results are bit-reproducible.
"""
from __future__ import annotations

from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, NumericError
from .matrix import (
    Matrix,
    _activation,
    _activation_grad,
    _add,
    _check_finite,
    _concat,
    _gram,
    _mm,
    _mul,
    _scale,
    dtype_of,
)


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "parents", "vjp", "grad", "param")

    def __init__(self, value, parents=(), vjp=None, param=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.param = param

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape


class Parameter:
    """A named trainable matrix with a same-shaped gradient buffer."""

    def __init__(self, name: str, value: Matrix, group: str = "graph"):
        self.name = name
        self.value = value
        self.grad = Matrix.zeros(value.rows, value.cols, value.precision)
        self.group = group

    def reset_grad(self) -> None:
        self.grad.data.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, {self.value.rows}x{self.value.cols}, group={self.group})"


class ParamStore:
    """Ordered collection of uniquely named parameters, tagged by lr group."""

    def __init__(self) -> None:
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: Matrix, group: str = "graph") -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if group not in ("graph", "encoder"):
            raise ValueError(f"unknown parameter group {group!r}")
        p = Parameter(name, value, group)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def group(self, tag: str) -> list[Parameter]:
        return [p for p in self._params.values() if p.group == tag]

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.reset_grad()

    def precision(self) -> str:
        precisions = {p.value.precision for p in self._params.values()}
        if len(precisions) > 1:
            raise ValueError(f"mixed parameter precisions: {sorted(precisions)}")
        return precisions.pop() if precisions else "f32"


def constant(value: Matrix | np.ndarray) -> Node:
    arr = value.data if isinstance(value, Matrix) else np.asarray(value)
    if arr.ndim != 2:
        raise DimensionError(f"constant must be 2-D, got shape {arr.shape}")
    return Node(_check_finite(arr, "constant"))


def leaf(param: Parameter) -> Node:
    return Node(param.value.data, param=param)


def _same_dtype(*nodes: Node) -> None:
    dtypes = {n.value.dtype for n in nodes}
    if len(dtypes) > 1:
        raise NumericError(f"mixed operand precisions: {sorted(map(str, dtypes))}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.astype(g.dtype, copy=False)


def mm(a: Node, b: Node) -> Node:
    _same_dtype(a, b)
    out = _mm(a.value, b.value)

    def vjp(g):
        return _mm(g, b.value.T), _mm(a.value.T, g)

    return Node(out, (a, b), vjp)


def gram_op(h: Node) -> Node:
    out = _gram(h.value)

    def vjp(g):
        return (_mm(g + g.T, h.value),)

    return Node(out, (h,), vjp)


def add(a: Node, b: Node) -> Node:
    _same_dtype(a, b)
    out = _add(a.value, b.value)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(out, (a, b), vjp)


def mul(a: Node, b: Node) -> Node:
    _same_dtype(a, b)
    out = _mul(a.value, b.value)

    def vjp(g):
        return _unbroadcast(_mul(g, b.value), a.shape), _unbroadcast(_mul(g, a.value), b.shape)

    return Node(out, (a, b), vjp)


def scale(a: Node, s: float) -> Node:
    out = _scale(a.value, s)

    def vjp(g):
        return (_scale(g, s),)

    return Node(out, (a,), vjp)


def transpose(a: Node) -> Node:
    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return Node(np.ascontiguousarray(a.value.T), (a,), vjp)


def act(a: Node, kind: str) -> Node:
    x = a.value
    out = _activation(x, kind)

    def vjp(g):
        return (_mul(g, _activation_grad(x, kind)),)

    return Node(out, (a,), vjp)


def concat_rows(parts: Sequence[Node]) -> Node:
    _same_dtype(*parts)
    out = _concat([p.value for p in parts], 0)
    offsets = np.cumsum([0] + [p.value.shape[0] for p in parts])

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1], :] for i in range(len(parts)))

    return Node(out, tuple(parts), vjp)


def concat_cols(parts: Sequence[Node]) -> Node:
    _same_dtype(*parts)
    out = _concat([p.value for p in parts], 1)
    offsets = np.cumsum([0] + [p.value.shape[1] for p in parts])

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return Node(out, tuple(parts), vjp)


def take_rows(a: Node, idx: Sequence[int] | np.ndarray) -> Node:
    index = np.asarray(idx, dtype=np.intp)
    out = np.ascontiguousarray(a.value[index, :])

    def vjp(g):
        da = np.zeros_like(a.value)
        np.add.at(da, index, g)
        return (da,)

    return Node(out, (a,), vjp)


def take_cols(a: Node, idx: Sequence[int] | np.ndarray) -> Node:
    index = np.asarray(idx, dtype=np.intp)
    out = np.ascontiguousarray(a.value[:, index])

    def vjp(g):
        da = np.zeros_like(a.value)
        np.add.at(da.T, index, g.T)
        return (da,)

    return Node(out, (a,), vjp)


def sum_rows(a: Node) -> Node:
    out = a.value.sum(axis=0, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return Node(out, (a,), vjp)


def cross_entropy(scores: Node, gold: int) -> Node:
    """Negative log softmax of the gold score; scores is a 1xN row of logits."""
    if scores.shape[0] != 1 or scores.shape[1] < 2:
        raise DimensionError(f"cross_entropy expects a 1xN row with N>=2, got {scores.shape}")
    n = scores.shape[1]
    if not 0 <= gold < n:
        raise ValueError(f"gold index {gold} out of range for {n} candidates")
    s = scores.value[0]
    m = s.max()
    z = s - m
    ez = np.exp(z)
    total = ez.sum()
    loss = np.log(total) - z[gold]
    out = np.array([[loss]], dtype=s.dtype)
    _check_finite(out, "cross_entropy output")

    def vjp(g):
        p = ez / total
        p[gold] -= 1.0
        return (g[0, 0] * p[None, :],)

    return Node(out, (scores,), vjp)


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(param) into every reachable Parameter's grad buffer."""
    if loss.shape != (1, 1):
        raise DimensionError(f"backward expects a scalar 1x1 loss, got {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones((1, 1), dtype=loss.value.dtype)
    for node in reversed(order):
        if node.grad is None:
            continue
        if node.vjp is not None:
            for parent, pg in zip(node.parents, node.vjp(node.grad)):
                if pg is None:
                    continue
                if parent.grad is None:
                    parent.grad = pg.copy()
                else:
                    parent.grad += pg
        if node.param is not None:
            node.param.grad.data += node.grad


def grad_check(
    loss_fn: Callable[[ParamStore], Node],
    params: ParamStore,
    epsilon: float = 1e-5,
) -> float:
    """Compare analytic gradients against central finite differences.

    Requires 64-bit parameters; returns the max relative error over every
    entry of every parameter, with denominator max(|analytic|, |numeric|, 1e-8).
    """
    if params.precision() != "f64":
        raise ValueError("grad_check requires 64-bit parameters")
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-6, 1e-3]")

    params.zero_grads()
    root = loss_fn(params)
    if not np.isfinite(root.value[0, 0]):
        raise NumericError("loss is non-finite at the evaluation point")
    backward(root)
    analytic = {p.name: p.grad.data.copy() for p in params}

    def eval_loss(pname: str) -> float:
        try:
            val = float(loss_fn(params).value[0, 0])
        except NumericError as exc:
            raise NumericError(
                f"non-finite loss while perturbing parameter {pname!r}: {exc}"
            ) from exc
        if not np.isfinite(val):
            raise NumericError(f"non-finite loss while perturbing parameter {pname!r}")
        return val

    max_rel = 0.0
    for p in params:
        flat = p.value.data.reshape(-1)
        ana = analytic[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = eval_loss(p.name)
            flat[i] = orig - epsilon
            lm = eval_loss(p.name)
            flat[i] = orig
            num = (lp - lm) / (2.0 * epsilon)
            denom = max(abs(ana[i]), abs(num), 1e-8)
            rel = abs(ana[i] - num) / denom
            if rel > max_rel:
                max_rel = rel
    return max_rel


def glorot_init(
    rng: np.random.Generator, rows: int, cols: int, precision: str = "f32"
) -> Matrix:
    """Uniform fan-based init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    a = float(np.sqrt(6.0 / (rows + cols)))
    return Matrix(rng.uniform(-a, a, size=(rows, cols)).astype(dtype_of(precision)))
