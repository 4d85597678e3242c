"""Reverse-mode differentiation over dense float64 arrays.

Every operation returns a fresh :class:`Tensor`; inputs are never mutated.
Gradients are accumulated by :meth:`Tensor.backward`, which walks the graph
in reverse topological order.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when an operation receives inconsistent shapes."""


class NumericError(FloatingPointError):
    """Raised when an operation produces a non-finite value."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def backward(self, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"backward from non-scalar node {self.op}#{self.node_id}")
            seed = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        self.grad = seed.astype(np.float64)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # operator sugar; shapes must match exactly
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, op=op)
    if not np.all(np.isfinite(out.data)):
        raise NumericError(f"non-finite value produced by {op}#{out.node_id}")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- stop-gradient
# Finite-difference checks need stop-gradient outputs (and other non-smooth
# choices such as code indices) held at their unperturbed values. A tape in
# record mode stores them; in replay mode it returns the stored values in order.

class _FreezeTape:
    def __init__(self) -> None:
        self.values: list = []
        self.replay = False
        self.cursor = 0

    def take(self, compute: Callable[[], object]):
        if not self.replay:
            value = compute()
            self.values.append(value)
            return value
        value = self.values[self.cursor]
        self.cursor += 1
        return value


_tape: contextvars.ContextVar[_FreezeTape | None] = contextvars.ContextVar("masd_freeze_tape", default=None)


@contextlib.contextmanager
def freeze_tape(tape: _FreezeTape):
    token = _tape.set(tape)
    try:
        yield tape
    finally:
        _tape.reset(token)


def frozen(compute: Callable[[], object]):
    """Evaluate a non-differentiable quantity, replaying it under a freeze tape."""
    tape = _tape.get()
    if tape is None:
        return compute()
    return tape.take(compute)


def stop_gradient(x: Tensor) -> Tensor:
    data = frozen(lambda: x.data.copy())
    return Tensor(data, op="stop_gradient")


def straight_through_value(x: Tensor, value: Tensor) -> Tensor:
    """Forward value of ``value``; the whole gradient goes to ``x``.

    Under a freeze tape the output is ``x`` plus the recorded offset
    ``value - x``, so finite differences see the identity the gradient assumes.
    """
    x, value = as_tensor(x), as_tensor(value)
    _same_shape("straight_through_value", x, value)
    if _tape.get() is None:
        data = value.data.copy()
    else:
        data = x.data + frozen(lambda: value.data - x.data)
    return _make(data, "straight_through_value", (x,), lambda g: (g,))


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _make(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g: (g * y,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (g * inside,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("minimum", a, b)
    take_a = a.data <= b.data
    return _make(np.minimum(a.data, b.data), "minimum", (a, b), lambda g: (g * take_a, g * ~take_a))


# ---------------------------------------------------------------- linear algebra

def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for a batch of row vectors ``x`` of shape (B, in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias {b.shape} does not match weight {w.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data

    def backward(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, "affine", parents, backward)


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    y = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(y), "sum", (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def sqnorm(a: Tensor, axis: int | None = -1) -> Tensor:
    """Squared Euclidean norm along ``axis`` (all entries when ``axis`` is None)."""
    y = (a.data * a.data).sum(axis=axis)

    def backward(g):
        if axis is None:
            return (2.0 * g * a.data,)
        return (2.0 * np.expand_dims(g, axis) * a.data,)

    return _make(np.asarray(y), "sqnorm", (a,), backward)


# ---------------------------------------------------------------- softmax family

def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, "softmax", (a,), backward)


def log_softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Log-softmax over the last axis; ``mask`` False entries get probability 0.

    Masked entries are reported as a large negative number rather than -inf so
    that the finiteness check stays meaningful.
    """
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -1e30)
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    if mask is not None:
        y = np.where(mask, y, -1e30)
        p = np.where(mask, p, 0.0)

    def backward(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, "log_softmax", (a,), backward)


# ---------------------------------------------------------------- structure

def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        y = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[p.shape for p in parts]}: {exc}") from None
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, splits, axis=axis)

    return _make(y, "concat", tuple(parts), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(y, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows ``a[index]``; gradients scatter-add back."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], "gather_rows", (a,), backward)


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[b, index[b]]`` for a (B, K) tensor."""
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick: {a.shape} with index {index.shape}")
    rows = np.arange(a.shape[0])

    def backward(g):
        out = np.zeros_like(a.data)
        out[rows, index] = g
        return (out,)

    return _make(a.data[rows, index], "pick", (a,), backward)


def broadcast_rows(a: Tensor, n: int) -> Tensor:
    """Repeat a vector into an (n, len) matrix."""
    if a.data.ndim != 1:
        raise ShapeError(f"broadcast_rows expects a vector, got {a.shape}")
    return _make(np.tile(a.data, (n, 1)), "broadcast_rows", (a,), lambda g: (g.sum(axis=0),))


def masked_attention(query: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray, heads: int) -> Tensor:
    """Multi-head attention pooling of a learned query over padded member sets.

    query: (P,) shared query; keys, values: (G, S, P); mask: (G, S) bool with
    at least one True per row. Returns (G, P): per head, the softmax-weighted
    sum of value slices using scaled dot-product scores.
    """
    mask = np.asarray(mask, dtype=bool)
    G, S, P = keys.shape
    if query.shape != (P,) or values.shape != (G, S, P) or mask.shape != (G, S):
        raise ShapeError(f"masked_attention: query {query.shape}, keys {keys.shape}, values {values.shape}, mask {mask.shape}")
    if P % heads:
        raise ShapeError(f"masked_attention: {heads} heads do not divide width {P}")
    if not mask.any(axis=1).all():
        raise ShapeError("masked_attention: empty member set")
    dh = P // heads
    q = query.data.reshape(heads, dh)
    k = keys.data.reshape(G, S, heads, dh)
    v = values.data.reshape(G, S, heads, dh)
    scores = np.einsum("gshd,hd->gsh", k, q) / np.sqrt(dh)
    scores = np.where(mask[:, :, None], scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w = w / w.sum(axis=1, keepdims=True)
    out = np.einsum("gsh,gshd->ghd", w, v).reshape(G, P)

    def backward(g):
        gh = g.reshape(G, heads, dh)
        d_v = np.einsum("gsh,ghd->gshd", w, gh)
        d_w = np.einsum("ghd,gshd->gsh", gh, v)
        d_s = w * (d_w - (d_w * w).sum(axis=1, keepdims=True)) / np.sqrt(dh)
        d_q = np.einsum("gsh,gshd->hd", d_s, k)
        d_k = np.einsum("gsh,hd->gshd", d_s, q)
        return d_q.reshape(P), d_k.reshape(G, S, P), d_v.reshape(G, S, P)

    return _make(out, "masked_attention", (query, keys, values), backward)


def total(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    out = parts[0]
    for p in parts[1:]:
        out = add(out, p)
    return out
