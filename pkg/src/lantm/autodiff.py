"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every intermediate as a :class:`Node` in creation
order, so the tape is topologically sorted by construction and backward is a
single reverse sweep.  The graph is rebuilt for every episode; nothing is
compiled or cached between episodes.

All elementwise ops broadcast like numpy.  Gradients flowing into a broadcast
operand are summed back down to the operand's shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    """One recorded value on a tape."""

    __slots__ = ("tape", "id", "op", "inputs", "value", "_backward", "_grad")

    def __init__(self, tape, id_, op, inputs, value, backward):
        self.tape = tape
        self.id = id_
        self.op = op
        self.inputs = inputs
        self.value = value
        self._backward = backward
        self._grad = None

    @property
    def input_ids(self) -> list[int]:
        return [n.id for n in self.inputs]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass(frozen=True)
class Parameter:
    """A named trainable leaf on a tape."""

    node_id: int
    name: str
    shape: tuple[int, ...]


class Tape:
    """Append-only record of an episode's computation.

    ``check_finite`` makes every forward evaluation assert that its value has
    no NaN/Inf; it is meant for tests and is off in the training loop.
    """

    def __init__(self, check_finite: bool = False):
        self.nodes: list[Node] = []
        self.parameters: dict[str, Parameter] = {}
        self.check_finite = check_finite

    def record(self, op: str, inputs: Sequence[Node], value, backward: Backward | None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value produced by {op!r}")
        node = Node(self, len(self.nodes), op, tuple(inputs), value, backward)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self.record("constant", (), np.array(value, dtype=np.float64), None)

    def parameter(self, name: str, value) -> Node:
        if name in self.parameters:
            raise ValueError(f"parameter {name!r} already on tape")
        node = self.record("parameter", (), np.array(value, dtype=np.float64), None)
        self.parameters[name] = Parameter(node.id, name, node.value.shape)
        return node

    def param_node(self, name: str) -> Node:
        return self.nodes[self.parameters[name].node_id]

    def zero_grad(self) -> None:
        for node in self.nodes:
            node._grad = None

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Fill ``grad`` on every node upstream of ``loss``; return parameter grads."""
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        self.zero_grad()
        loss._grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            g = node._grad
            if g is None or node._backward is None:
                continue
            for inp, gi in zip(node.inputs, node._backward(g)):
                if gi is None:
                    continue
                # never accumulate in place: closures may hand back aliased arrays
                inp._grad = gi if inp._grad is None else inp._grad + gi
        return {name: self.nodes[p.node_id].grad for name, p in self.parameters.items()}


def backward(loss: Node) -> dict[str, np.ndarray]:
    return loss.tape.backward(loss)


# ---------------------------------------------------------------------------
# helpers


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return Tape()


def lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {shapes}") from None


# ---------------------------------------------------------------------------
# primitives


def constant(tape: Tape, value) -> Node:
    return tape.constant(value)


def add(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = lift(t, a), lift(t, b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return t.record("add", (a, b), a.value + b.value,
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = lift(t, a), lift(t, b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return t.record("sub", (a, b), a.value - b.value,
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def neg(a: Node) -> Node:
    return a.tape.record("neg", (a,), -a.value, lambda g: (-g,))


def mul(a, b) -> Node:
    """Elementwise product; a (..., 1) operand acts as a scalar-vector scale."""
    t = _tape_of(a, b)
    a, b = lift(t, a), lift(t, b)
    _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return t.record("mul", (a, b), av * bv,
                    lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(s, v) -> Node:
    """Multiply each vector along the last axis of ``v`` by the scalar(s) ``s``."""
    t = _tape_of(s, v)
    s, v = lift(t, s), lift(t, v)
    if s.value.ndim == v.value.ndim - 1:
        s = reshape(s, s.shape + (1,))
    return mul(s, v)


def matmul(x, w) -> Node:
    """``x @ w`` with ``x`` of shape (..., n) and ``w`` of shape (n, k)."""
    t = _tape_of(x, w)
    x, w = lift(t, x), lift(t, w)
    xv, wv = x.value, w.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0]:
        raise ValueError(f"matmul: cannot multiply {xv.shape} by {wv.shape}")

    def back(g):
        gx = g @ wv.T
        gw = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return t.record("matmul", (x, w), xv @ wv, back)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    t = _tape_of(*nodes)
    nodes = [lift(t, n) for n in nodes]
    values = [n.value for n in nodes]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[v.shape for v in values]}") from None
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
    return t.record("concat", nodes, out, lambda g: np.split(g, bounds, axis=axis))


def slice_last(a: Node, start: int, stop: int) -> Node:
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return a.tape.record("slice", (a,), a.value[..., start:stop], back)


def split(a: Node, sizes: Sequence[int]) -> list[Node]:
    """Split the last axis into consecutive pieces of the given sizes."""
    if sum(sizes) != a.shape[-1]:
        raise ValueError(f"split: sizes {list(sizes)} do not cover last axis {a.shape[-1]}")
    out, start = [], 0
    for n in sizes:
        out.append(slice_last(a, start, start + n))
        start += n
    return out


def stack(nodes: Sequence[Node], axis: int = 0) -> Node:
    t = _tape_of(*nodes)
    nodes = [lift(t, n) for n in nodes]
    shapes = {n.shape for n in nodes}
    if len(shapes) != 1:
        raise ValueError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([n.value for n in nodes], axis=axis)
    k = len(nodes)
    return t.record("stack", nodes, out,
                    lambda g: [np.take(g, i, axis=axis) for i in range(k)])


def reshape(a: Node, shape: tuple[int, ...]) -> Node:
    old = a.shape
    return a.tape.record("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(old),))


def broadcast_to(a: Node, shape: tuple[int, ...]) -> Node:
    old = a.shape
    out = np.broadcast_to(a.value, shape).copy()
    return a.tape.record("broadcast", (a,), out, lambda g: (_unbroadcast(g, old),))


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return a.tape.record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Node) -> Node:
    # split by sign so exp never overflows
    x = a.value
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return a.tape.record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def softplus(a: Node) -> Node:
    x = a.value
    y = np.logaddexp(0.0, x)
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return a.tape.record("softplus", (a,), y, lambda g: (g * s,))


def exp(a: Node) -> Node:
    y = np.exp(a.value)
    return a.tape.record("exp", (a,), y, lambda g: (g * y,))


def log(a: Node) -> Node:
    x = a.value
    if np.any(x <= 0):
        raise FloatingPointError("log of non-positive value")
    return a.tape.record("log", (a,), np.log(x), lambda g: (g / x,))


def sqrt(a: Node) -> Node:
    x = a.value
    if np.any(x <= 0):
        raise FloatingPointError("sqrt of non-positive value (derivative undefined)")
    y = np.sqrt(x)
    return a.tape.record("sqrt", (a,), y, lambda g: (g * 0.5 / y,))


def reciprocal(a: Node) -> Node:
    x = a.value
    if np.any(x == 0):
        raise FloatingPointError("reciprocal of zero")
    y = 1.0 / x
    return a.tape.record("reciprocal", (a,), y, lambda g: (-g * y * y,))


def sqdist(a, b) -> Node:
    """Squared Euclidean distance along the last axis, broadcasting leading axes."""
    t = _tape_of(a, b)
    a, b = lift(t, a), lift(t, b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"sqdist: last axes differ {a.shape} vs {b.shape}")
    diff = a.value - b.value
    sa, sb = a.shape, b.shape

    def back(g):
        gd = 2.0 * g[..., None] * diff
        return _unbroadcast(gd, sa), _unbroadcast(-gd, sb)

    return t.record("sqdist", (a, b), np.sum(diff * diff, axis=-1), back)


def reduce_sum(a: Node, axis: int | None = None, keepdims: bool = False) -> Node:
    shape = a.shape
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return a.tape.record("sum", (a,), out, back)


def softmax_cross_entropy(logits: Node, targets) -> Node:
    """Summed negative log-likelihood of integer ``targets`` under softmax(logits).

    ``logits`` has shape (..., V); ``targets`` holds class indices of shape (...).
    """
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.value
    if targets.shape != z.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {z.shape}")
    if np.any(targets < 0) or np.any(targets >= z.shape[-1]):
        raise ValueError("target index out of vocabulary")
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]

    def back(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (g * p,)

    return logits.tape.record("softmax_xent", (logits,), -picked.sum(), back)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    """Analytic vs central-difference comparison over sampled coordinates."""

    entries: list[tuple[str, tuple[int, ...], float, float, float]] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e[4] for e in self.entries), default=0.0)

    def __len__(self):
        return len(self.entries)

    def worst(self, n: int = 5):
        return sorted(self.entries, key=lambda e: -e[4])[:n]


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(builder: Callable[[dict[str, np.ndarray]], Node],
              params: dict[str, np.ndarray],
              names: Sequence[str] | None = None,
              n_coords: int | None = 200,
              step: float = 1e-5,
              floor: float = 1e-6,
              rng: np.random.Generator | None = None) -> GradcheckReport:
    """Compare tape gradients to central differences.

    ``builder`` maps a parameter dict to a scalar loss node on a fresh tape.
    Coordinates are drawn without replacement across the selected parameters;
    ``n_coords=None`` checks every coordinate.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    names = list(params) if names is None else list(names)
    report = GradcheckReport()
    coords = [(nm, idx) for nm in names for idx in np.ndindex(params[nm].shape)]
    if not coords:
        return report
    if n_coords is not None and n_coords < len(coords):
        rng = np.random.default_rng(0) if rng is None else rng
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    loss = builder(work)
    analytic = loss.tape.backward(loss)

    for nm, idx in coords:
        orig = work[nm][idx]
        work[nm][idx] = orig + step
        up = float(builder(work).value)
        work[nm][idx] = orig - step
        down = float(builder(work).value)
        work[nm][idx] = orig
        numeric = (up - down) / (2.0 * step)
        a = float(analytic[nm][idx])
        report.entries.append((nm, idx, a, numeric, relative_error(a, numeric, floor)))
    return report
