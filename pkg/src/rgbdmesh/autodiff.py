"""Reverse-mode automatic differentiation over dense float64 arrays.

Tape-based: every operation returns a new :class:`Value` holding the forward
result and a closure that propagates the output gradient to its parents.
``backward`` walks the dependency graph in reverse topological order and
accumulates gradients additively across fan-out.

Shape discipline is strict: elementwise operations require identical shapes,
with the single exception of a size-1 (scalar) operand broadcast against an
array. This keeps the hand-rolled engine's bug surface small; anything fancier
is composed from reshape / slice / matmul.

A :class:`Graph` records Values in creation order for one thread. Recording is
optional for plain forward/backward use (the graph structure lives in the
parent links), but ``grad_check`` relies on it to locate relu/abs kinks, and
it is the unit that must stay confined to a single thread.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Value",
    "Graph",
    "ShapeError",
    "constant",
    "parameter",
    "concat",
    "matmul",
    "batch_scale",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a primitive."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class _GraphState(threading.local):
    def __init__(self):
        self.stack: list[Graph] = []


_STATE = _GraphState()


class Graph:
    """Creation-order tape of Values for one thread of execution.

    Usage is optional but recommended around training steps so intermediate
    Values can be dropped as a unit::

        with Graph():
            loss = model_forward(...)
            loss.backward()
    """

    def __init__(self):
        self.values: list[Value] = []

    def __enter__(self) -> "Graph":
        _STATE.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _STATE.stack.pop()
        assert popped is self, "Graph contexts must nest properly"


def _record(v: "Value") -> None:
    if _STATE.stack:
        _STATE.stack[-1].values.append(v)


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Value:
    """A dense float64 array node on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Value", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = _as_array(data)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = parents
        self._backward = backward
        _record(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Value(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph traversal ---------------------------------------------------

    def _toposort(self) -> list["Value"]:
        # Iterative DFS with gray/black marking; a gray revisit is a cycle.
        order: list[Value] = []
        state: dict[int, int] = {}  # id -> 1 gray, 2 black
        stack: list[tuple[Value, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                state[id(node)] = 2
                order.append(node)
                continue
            mark = state.get(id(node))
            if mark == 2:
                continue
            if mark == 1:
                raise ValueError("cycle detected in computation graph")
            state[id(node)] = 1
            stack.append((node, True))
            for p in node._parents:
                if state.get(id(p)) != 2:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must be scalar-valued (size 1). Interior gradients are
        transient; leaf ``grad`` fields accumulate across calls until cleared
        by the caller.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar output, got shape {self.shape}")
        order = self._toposort()
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None or not node.requires_grad:
                continue
            if not node._parents:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            if node._backward is not None:
                node._backward(g, grads)

    # -- operator sugar ----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # method spellings used throughout the package
    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def abs(self):
        return absolute(self)

    def sin(self):
        return sin(self)

    def cos(self):
        return cos(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def sum(self, axis: int | None = None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape: Sequence[int]):
        return reshape(self, shape)

    def narrow(self, axis: int, start: int, stop: int):
        return narrow(self, axis, start, stop)

    def transpose_last2(self):
        return transpose_last2(self)


def constant(data) -> Value:
    """A leaf that never receives gradient."""
    return Value(data, requires_grad=False)


def parameter(data) -> Value:
    """A trainable leaf."""
    return Value(data, requires_grad=True)


def _lift(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _accumulate(grads: dict[int, np.ndarray], node: Value, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    key = id(node)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Undo scalar-with-array broadcasting: collapse the gradient back to the
    # scalar operand's shape.
    if g.shape == shape:
        return g
    return np.full(shape, np.sum(g))


def _check_elementwise(op: str, a: Value, b: Value) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(op, a.shape, b.shape)


def _binary(op: str, a, b, fwd, dfa, dfb) -> Value:
    a, b = _lift(a), _lift(b)
    _check_elementwise(op, a, b)
    out_data = fwd(a.data, b.data)

    def backward(g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        _accumulate(grads, a, _reduce_to(dfa(g, a.data, b.data), a.shape))
        _accumulate(grads, b, _reduce_to(dfb(g, a.data, b.data), b.shape))

    return Value(out_data, op=op, parents=(a, b), backward=backward)


def add(a, b) -> Value:
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Value:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Value:
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Value:
    return _binary(
        "div",
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def _unary(op: str, a, fwd, dfa) -> Value:
    a = _lift(a)
    out_data = fwd(a.data)

    def backward(g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        _accumulate(grads, a, dfa(g, a.data, out_data))

    return Value(out_data, op=op, parents=(a,), backward=backward)


def neg(a) -> Value:
    return _unary("neg", a, lambda x: -x, lambda g, x, y: -g)


def relu(a) -> Value:
    # Subgradient at exactly 0 is 0.
    return _unary("relu", a, lambda x: np.maximum(x, 0.0), lambda g, x, y: g * (x > 0.0))


def exp(a) -> Value:
    return _unary("exp", a, np.exp, lambda g, x, y: g * y)


def log(a) -> Value:
    return _unary("log", a, np.log, lambda g, x, y: g / x)


def sqrt(a) -> Value:
    return _unary("sqrt", a, np.sqrt, lambda g, x, y: g * 0.5 / y)


def square(a) -> Value:
    return _unary("square", a, np.square, lambda g, x, y: g * 2.0 * x)


def absolute(a) -> Value:
    # Subgradient at exactly 0 is 0 (np.sign(0) == 0).
    return _unary("abs", a, np.abs, lambda g, x, y: g * np.sign(x))


def sin(a) -> Value:
    return _unary("sin", a, np.sin, lambda g, x, y: g * np.cos(x))


def cos(a) -> Value:
    return _unary("cos", a, np.cos, lambda g, x, y: -g * np.sin(x))


def sigmoid(a) -> Value:
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary("sigmoid", a, fwd, lambda g, x, y: g * y * (1.0 - y))


def softplus(a) -> Value:
    """log(1 + exp(x)), computed in the overflow-safe split form."""

    def fwd(x):
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def dfa(g, x, y):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return g * s

    return _unary("softplus", a, fwd, dfa)


def matmul(a, b) -> Value:
    """Matrix product: 2-D @ 2-D, or batched 3-D @ 3-D with equal batch."""
    a, b = _lift(a), _lift(b)
    ok = (a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0]) or (
        a.data.ndim == 3 and b.data.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1]
    )
    if not ok:
        raise ShapeError("matmul", a.shape, b.shape)
    out_data = a.data @ b.data

    def backward(g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        _accumulate(grads, a, g @ np.swapaxes(b.data, -1, -2))
        _accumulate(grads, b, np.swapaxes(a.data, -1, -2) @ g)

    return Value(out_data, op="matmul", parents=(a, b), backward=backward)


def concat(values: Sequence[Value], axis: int = -1) -> Value:
    """Concatenate along an axis (default: last)."""
    vals = [_lift(v) for v in values]
    ndim = vals[0].data.ndim
    ax = axis % ndim if ndim else 0
    base = list(vals[0].shape)
    for v in vals[1:]:
        other = list(v.shape)
        if len(other) != ndim or other[:ax] + other[ax + 1 :] != base[:ax] + base[ax + 1 :]:
            raise ShapeError("concat", vals[0].shape, v.shape)
    out_data = np.concatenate([v.data for v in vals], axis=ax)
    offsets = np.cumsum([0] + [v.shape[ax] for v in vals])

    def backward(g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        for v, lo, hi in zip(vals, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * ndim
            sl[ax] = slice(int(lo), int(hi))
            _accumulate(grads, v, g[tuple(sl)])

    return Value(out_data, op="concat", parents=tuple(vals), backward=backward)


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Value:
    a = _lift(a)
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        if axis is None:
            _accumulate(grads, a, np.broadcast_to(np.reshape(g, ()), a.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accumulate(grads, a, np.broadcast_to(ge, a.shape).copy())

    return Value(out_data, op="sum", parents=(a,), backward=backward)


def reduce_mean(a, axis: int | None = None, keepdims: bool = False) -> Value:
    a = _lift(a)
    n = a.size if axis is None else a.shape[axis]
    out_data = np.mean(a.data, axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        if axis is None:
            _accumulate(grads, a, np.broadcast_to(np.reshape(g, ()) / n, a.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accumulate(grads, a, np.broadcast_to(ge / n, a.shape).copy())

    return Value(out_data, op="mean", parents=(a,), backward=backward)


def reshape(a, shape: Sequence[int]) -> Value:
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=int)) != a.size and -1 not in shape:
        raise ShapeError("reshape", a.shape, shape)
    out_data = a.data.reshape(shape)

    def backward(g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        _accumulate(grads, a, g.reshape(a.shape))

    return Value(out_data, op="reshape", parents=(a,), backward=backward)


def narrow(a, axis: int, start: int, stop: int) -> Value:
    """Slice [start:stop) along one axis."""
    a = _lift(a)
    ndim = a.data.ndim
    ax = axis % ndim
    if not (0 <= start <= stop <= a.shape[ax]):
        raise ShapeError("slice", a.shape, (start, stop))
    sl = [slice(None)] * ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)
    out_data = a.data[sl]

    def backward(g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[sl] = g
            _accumulate(grads, a, full)

    return Value(out_data, op="slice", parents=(a,), backward=backward)


def transpose_last2(a) -> Value:
    """Swap the last two axes (matrix transpose; batch-preserving for 3-D)."""
    a = _lift(a)
    if a.data.ndim < 2:
        raise ShapeError("transpose", a.shape)
    out_data = np.swapaxes(a.data, -1, -2).copy()

    def backward(g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        _accumulate(grads, a, np.swapaxes(g, -1, -2))

    return Value(out_data, op="transpose", parents=(a,), backward=backward)


def batch_scale(x, s) -> Value:
    """Multiply x[b, ...] by the per-batch scalar s[b]."""
    x, s = _lift(x), _lift(s)
    if s.data.ndim != 1 or x.data.ndim < 2 or s.shape[0] != x.shape[0]:
        raise ShapeError("batch_scale", x.shape, s.shape)
    sb = s.data.reshape((-1,) + (1,) * (x.data.ndim - 1))
    out_data = x.data * sb

    def backward(g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        _accumulate(grads, x, g * sb)
        _accumulate(grads, s, np.sum(g * x.data, axis=tuple(range(1, x.data.ndim))))

    return Value(out_data, op="batch_scale", parents=(x, s), backward=backward)


def custom(op: str, out_data: np.ndarray, parents: tuple[Value, ...], backward_fn) -> Value:
    """Install a fused operation with a hand-written backward rule.

    ``backward_fn(g)`` must return one gradient array per parent (or None for
    parents that need none). Used by the kernel layer for the body-model and
    rotation ops.
    """

    def backward(g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        for p, pg in zip(parents, backward_fn(g)):
            if pg is not None:
                _accumulate(grads, p, pg)

    return Value(out_data, op=op, parents=parents, backward=backward)


# -- gradient checking -----------------------------------------------------

_KINK_OPS = ("relu", "abs")


def _kink_signature(graph: Graph, epsilon: float):
    """Sign pattern of every relu/abs input, or None where an input sits
    within epsilon of the kink (unconditionally unreliable)."""
    sig = []
    for v in graph.values:
        if v.op in _KINK_OPS:
            x = v._parents[0].data
            if np.any(np.abs(x) <= epsilon):
                sig.append(None)
            else:
                sig.append((x > 0.0).tobytes())
    return sig


def _signatures_stable(sa, sb) -> bool:
    if len(sa) != len(sb):
        return False
    for a, b in zip(sa, sb):
        if a is None or b is None or a != b:
            return False
    return True


def grad_check(
    fn: Callable[[dict[str, Value]], Value],
    point: dict[str, np.ndarray],
    epsilon: float = 1e-5,
    sample_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of a scalar expression against central
    finite differences.

    Returns the max over checked coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.

    Coordinates whose perturbation flips or grazes a relu/abs kink are
    skipped. ``sample_coords`` caps the number of probed coordinates per input
    (seeded subsample) for expressions with many parameters.
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}

    leaves = {k: parameter(a.copy()) for k, a in arrays.items()}
    out = fn(leaves)
    if out.size != 1:
        raise ValueError("grad_check requires a scalar-valued expression")
    out.backward()
    analytic = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in leaves.items()}

    def probe(key: str, flat_index: int, delta: float):
        pt = {k: a.copy() for k, a in arrays.items()}
        pt[key].flat[flat_index] += delta
        with Graph() as g:
            val = fn({k: constant(a) for k, a in pt.items()})
        return float(val.data.reshape(())), _kink_signature(g, epsilon)

    rng = np.random.default_rng(seed)
    max_err = 0.0
    for key, arr in arrays.items():
        idx = np.arange(arr.size)
        if sample_coords is not None and arr.size > sample_coords:
            idx = rng.choice(arr.size, size=sample_coords, replace=False)
        for i in idx:
            f_plus, sig_plus = probe(key, int(i), epsilon)
            f_minus, sig_minus = probe(key, int(i), -epsilon)
            if not _signatures_stable(sig_plus, sig_minus):
                continue
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(analytic[key].flat[i])
            denom = max(abs(a), abs(numeric), 1e-8)
            max_err = max(max_err, abs(a - numeric) / denom)
    return max_err
