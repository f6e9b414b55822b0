"""Small dense reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records every node created during a forward pass. Calling
:meth:`Tape.backward` on a scalar node walks the records in reverse and
returns gradients keyed by parameter name. Only the operations needed by the
towers and loss estimators are provided; shapes are explicit and the only
broadcasting allowed is a row-vector bias added to a matrix.
"""
from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Node:
    """A value on a tape plus the rule that maps its adjoint to its parents."""

    __slots__ = ("tape", "value", "parents", "vjp", "param", "index")

    def __init__(self, tape: "Tape", value: np.ndarray, parents: tuple = (),
                 vjp: Optional[Callable] = None, param: Optional[str] = None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.param = param
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return rsub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, param={self.param!r})"


class Tape:
    """Single-owner record of one forward pass."""

    def __init__(self):
        self.nodes: List[Node] = []

    def param(self, name: str, value: np.ndarray) -> Node:
        return Node(self, value, param=name)

    def constant(self, value) -> Node:
        return Node(self, np.asarray(value, dtype=DTYPE))

    def backward(self, loss: Node) -> Dict[str, np.ndarray]:
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        adj: Dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        grads: Dict[str, np.ndarray] = {}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = adj.pop(node.index, None)
            if g is None:
                continue
            if node.param is not None:
                if node.param in grads:
                    grads[node.param] = grads[node.param] + g
                else:
                    grads[node.param] = g
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if parent.index in adj:
                    adj[parent.index] = adj[parent.index] + pg
                else:
                    adj[parent.index] = pg
        return grads


def _node(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _record(tape, value, parents, vjp) -> Node:
    return Node(tape, value, tuple(parents), vjp)


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def _bias_shapes(a: np.ndarray, b: np.ndarray) -> bool:
    return a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _node(tape, a), _node(tape, b)
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        return _record(tape, av + bv, (a, b), lambda g: (g, g))
    if bv.ndim == 0:
        return _record(tape, av + bv, (a, b), lambda g: (g, g.sum()))
    if av.ndim == 0:
        return _record(tape, av + bv, (a, b), lambda g: (g.sum(), g))
    if _bias_shapes(av, bv):
        return _record(tape, av + bv, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {av.shape} and {bv.shape}")


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    return add(a, scale(_node(tape, b), -1.0))


def rsub(c: float, x: Node) -> Node:
    """c - x for a python scalar c."""
    return _record(x.tape, c - x.value, (x,), lambda g: (-g,))


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return _record(x.tape, x.value * c, (x,), lambda g: (g * c,))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _node(tape, a), _node(tape, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        if bv.ndim == 0:
            return _record(tape, av * bv, (a, b), lambda g: (g * bv, (g * av).sum()))
        raise ShapeError(f"mul: incompatible shapes {av.shape} and {bv.shape}")
    return _record(tape, av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _node(tape, a), _node(tape, b)
    av, bv = a.value, b.value
    if bv.ndim == 0 and av.ndim > 0:
        out = av / bv
        return _record(tape, out, (a, b), lambda g: (g / bv, -(g * av).sum() / (bv * bv)))
    if av.shape != bv.shape:
        raise ShapeError(f"div: incompatible shapes {av.shape} and {bv.shape}")
    out = av / bv
    return _record(tape, out, (a, b), lambda g: (g / bv, -g * out / bv))


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    return _record(a.tape, av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """Branch-stable logistic function."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Node) -> Node:
    s = sigmoid_array(x.value)
    return _record(x.tape, s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return _record(x.tape, np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def softplus(x: Node) -> Node:
    v = x.value
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return _record(x.tape, out, (x,), lambda g: (g * sigmoid_array(v),))


def log(x: Node) -> Node:
    v = x.value
    return _record(x.tape, np.log(v), (x,), lambda g: (g / v,))


def absolute(x: Node) -> Node:
    sign = np.sign(x.value)
    return _record(x.tape, np.abs(x.value), (x,), lambda g: (g * sign,))


def square(x: Node) -> Node:
    v = x.value
    return _record(x.tape, v * v, (x,), lambda g: (2.0 * g * v,))


def clip(x: Node, lo: float, hi: float) -> Node:
    """Clamp into [lo, hi]; the gradient is zero where the clamp is active."""
    v = x.value
    inside = (v >= lo) & (v <= hi)
    return _record(x.tape, np.clip(v, lo, hi), (x,), lambda g: (g * inside,))


def detach(x: Node) -> Node:
    return x.tape.constant(x.value.copy())


# ---------------------------------------------------------------------------
# reductions and reshaping


def total(x: Node) -> Node:
    """Sum of all entries, accumulated left to right over the flattened array."""
    shape = x.value.shape
    value = np.asarray(_ordered_sum(x.value.ravel()), dtype=DTYPE)
    return _record(x.tape, value, (x,), lambda g: (np.full(shape, float(g), dtype=DTYPE),))


def _ordered_sum(flat: np.ndarray) -> float:
    # np.add.reduce uses pairwise summation; cumsum is strictly sequential.
    if flat.size == 0:
        return 0.0
    return float(np.cumsum(flat)[-1])


def reshape(x: Node, shape: Sequence[int]) -> Node:
    old = x.value.shape
    return _record(x.tape, x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Node], axis: int = 1) -> Node:
    if not xs:
        raise ShapeError("concat of nothing")
    tape = xs[0].tape
    values = [x.value for x in xs]
    sizes = [v.shape[axis] for v in values]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(tape, np.concatenate(values, axis=axis), xs, vjp)


def take_rows(table: Node, ids: np.ndarray) -> Node:
    """Embedding lookup: rows of ``table`` selected by integer ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = table.value.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"id out of range for table with {n_rows} rows")

    def vjp(g):
        out = np.zeros_like(table.value)
        np.add.at(out, ids, g)
        return (out,)

    return _record(table.tape, table.value[ids], (table,), vjp)


def weighted_mean_rows(table: Node, ids: np.ndarray, weights: np.ndarray,
                       offsets: np.ndarray) -> Node:
    """Per-segment ``sum_k w_k * table[id_k] / K`` for CSR-style segments.

    Segment ``s`` owns entries ``offsets[s]:offsets[s+1]``; every segment must
    be non-empty.
    """
    ids = np.asarray(ids, dtype=np.int64)
    weights = np.asarray(weights, dtype=DTYPE)
    offsets = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(offsets)
    if np.any(counts <= 0):
        raise ValueError("empty weighted list")
    n_rows = table.value.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"id out of range for table with {n_rows} rows")
    seg = np.repeat(np.arange(len(counts)), counts)
    coef = weights / counts[seg]
    dim = table.value.shape[1]
    out = np.zeros((len(counts), dim), dtype=DTYPE)
    np.add.at(out, seg, coef[:, None] * table.value[ids])

    def vjp(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids, coef[:, None] * g[seg])
        return (gt,)

    return _record(table.tape, out, (table,), vjp)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; state persists across calls to :meth:`step`."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Update ``params`` in place; parameters without a gradient are untouched."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
                raise FloatingPointError(
                    f"non-finite gradient for {name!r}: {bad} of {np.size(g)} entries")
            if g.shape != params[name].shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape "
                                 f"{params[name].shape} for {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def squared_norm(params: Dict[str, np.ndarray], names: Optional[Iterable[str]] = None) -> float:
    """Sum of squared entries over the named tensors, in sorted-name order."""
    names = sorted(params) if names is None else sorted(names)
    acc = 0.0
    for name in names:
        v = params[name].ravel()
        acc += _ordered_sum(v * v)
    return acc
