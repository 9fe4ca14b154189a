"""Dense float64 tensors with a reverse-mode gradient tape.

Every value in the model stack is a 2-D float64 array wrapped in a
:class:`Tensor`.  Ops executed while recording build a DAG: each result
keeps references to its parent tensors and a closure that maps the
result's adjoint to parent adjoints.  ``backward`` replays those
closures in reverse topological order and accumulates gradients on the
leaf tensors that requested them.

Scalars are represented as shape (1, 1) tensors.  The tape is
per-thread; ``no_grad`` suspends recording on the current thread.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "GraphError",
    "no_grad",
    "constant",
    "parameter",
    "backward",
    "zero_grad",
    "matmul",
    "add",
    "mul",
    "relu",
    "gelu",
    "log",
    "scale",
    "transpose",
    "softmax_rows",
    "mean_axis",
    "sum_all",
    "l2_normalize_rows",
    "gather_rows",
    "add_bias",
    "slice_cols",
    "concat_rows",
    "concat_cols",
    "layer_norm",
    "dropout",
]


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = tuple(tuple(int(n) for n in s) for s in shapes)
        rendered = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class GraphError(RuntimeError):
    """Invalid tape use, e.g. backward through a consumed graph."""


class _ThreadState(threading.local):
    grad_enabled = True


_thread_state = _ThreadState()


def grad_enabled() -> bool:
    return _thread_state.grad_enabled


class no_grad:
    """Context manager that disables tape recording on this thread."""

    def __enter__(self) -> "no_grad":
        self._previous = grad_enabled()
        _thread_state.grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _thread_state.grad_enabled = self._previous
        return False


# Sentinel marking a node whose backward closure has already run.
_CONSUMED = object()

# Tokens for visited-marking during the topological walk; one per backward call.
_mark_counter = itertools.count(1)


class Tensor:
    """A 2-D float64 array, optionally tracked by the gradient tape."""

    __slots__ = ("values", "requires_grad", "grad", "name", "_parents", "_push", "_adj", "_mark")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        array = np.asarray(values, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim != 2:
            raise ShapeMismatchError("tensor", array.shape)
        self.values = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple["Tensor", ...] = ()
        self._push: object = None
        self._adj: Optional[np.ndarray] = None
        self._mark = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeMismatchError("item", self.shape)
        return float(self.values[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def constant(values, name: Optional[str] = None) -> Tensor:
    return Tensor(values, requires_grad=False, name=name)


def parameter(values, name: Optional[str] = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _attach(values: np.ndarray, parents: Sequence[Tensor], push: Callable) -> Tensor:
    # Hot path: op results are always fresh 2-D float64 arrays, so skip
    # the validation in Tensor.__init__.
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.name = None
    out._adj = None
    out._mark = 0
    if _thread_state.grad_enabled:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = tuple(parents)
                out._push = push
                return out
    out.requires_grad = False
    out._parents = ()
    out._push = None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every tracked leaf.

    The loss must be a scalar produced by a live (not yet consumed)
    graph.  Running backward releases the graph; a second call through
    any shared node raises :class:`GraphError`.
    """
    if loss.values.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any tracked parameter")

    # Postorder over the DAG; the mark token is unique to this call and
    # set only when a node is emitted.  A node is emitted the first time
    # its expanded entry pops, by which point every consumer that pushed
    # it sits deeper in the stack and has already been emitted, so shared
    # nodes collect all adjoint contributions before being processed.
    # (Marking at discovery instead would emit a node reached first via a
    # short path, e.g. a residual connection, before its other consumer.)
    token = next(_mark_counter)
    order: list[Tensor] = []
    append_order = order.append
    stack: list = [(loss, False)]
    push_stack = stack.append
    while stack:
        node, expanded = stack.pop()
        if node._mark == token:
            continue
        if expanded:
            node._mark = token
            append_order(node)
            continue
        if node._push is _CONSUMED:
            raise GraphError("backward was already run through part of this graph")
        push_stack((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent._mark != token:
                push_stack((parent, False))

    loss._adj = np.ones_like(loss.values)
    for node in reversed(order):
        adjoint = node._adj
        if adjoint is None:
            continue
        node._adj = None
        fn = node._push
        if fn is None:
            # Leaf: accumulate into grad.
            if node.requires_grad:
                node.grad = adjoint.copy() if node.grad is None else node.grad + adjoint
            continue
        parent_adjoints = fn(adjoint)
        for parent, parent_adj in zip(node._parents, parent_adjoints):
            if parent_adj is None or not parent.requires_grad:
                continue
            held = parent._adj
            parent._adj = parent_adj if held is None else held + parent_adj
        node._push = _CONSUMED


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.shape[1] != bv.shape[0]:
        raise ShapeMismatchError("matmul", av.shape, bv.shape)
    out = av @ bv

    def push(g: np.ndarray):
        da = g @ bv.T if a.requires_grad else None
        db = av.T @ g if b.requires_grad else None
        return da, db

    return _attach(out, (a, b), push)


def add(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.shape != bv.shape:
        raise ShapeMismatchError("add", av.shape, bv.shape)

    def push(g: np.ndarray):
        return g, g

    return _attach(av + bv, (a, b), push)


def mul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.shape != bv.shape:
        raise ShapeMismatchError("mul", av.shape, bv.shape)

    def push(g: np.ndarray):
        da = g * bv if a.requires_grad else None
        db = g * av if b.requires_grad else None
        return da, db

    return _attach(av * bv, (a, b), push)


def relu(t: Tensor) -> Tensor:
    mask = t.values > 0.0

    def push(g: np.ndarray):
        return (g * mask,)

    return _attach(np.where(mask, t.values, 0.0), (t,), push)


_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


def gelu(t: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = t.values
    x2 = x * x
    inner = _GELU_K * (x + _GELU_C * (x2 * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def push(g: np.ndarray):
        d_inner = _GELU_K * (1.0 + 3.0 * _GELU_C * x2)
        local = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
        return (g * local,)

    return _attach(out, (t,), push)


def log(t: Tensor) -> Tensor:
    x = t.values

    def push(g: np.ndarray):
        return (g / x,)

    return _attach(np.log(x), (t,), push)


def scale(t: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def push(g: np.ndarray):
        return (g * factor,)

    return _attach(t.values * factor, (t,), push)


def transpose(t: Tensor) -> Tensor:
    def push(g: np.ndarray):
        return (g.T,)

    return _attach(t.values.T, (t,), push)


def softmax_rows(t: Tensor) -> Tensor:
    shifted = t.values - t.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def push(g: np.ndarray):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _attach(y, (t,), push)


def mean_axis(t: Tensor, axis: int) -> Tensor:
    if axis not in (0, 1):
        raise ValueError(f"mean_axis: axis must be 0 or 1, got {axis}")
    n = t.shape[axis]
    out = t.values.sum(axis=axis, keepdims=True) / n

    def push(g: np.ndarray):
        return (np.broadcast_to(g, t.shape) / n,)

    return _attach(out, (t,), push)


def sum_all(t: Tensor) -> Tensor:
    out = np.array([[t.values.sum()]])

    def push(g: np.ndarray):
        return (np.full(t.shape, float(g[0, 0])),)

    return _attach(out, (t,), push)


def l2_normalize_rows(t: Tensor) -> Tensor:
    norms = np.sqrt((t.values**2).sum(axis=1, keepdims=True))
    if not np.all(norms > 0.0):
        raise ValueError("l2_normalize_rows: zero-norm row")
    y = t.values / norms

    def push(g: np.ndarray):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _attach(y, (t,), push)


def gather_rows(t: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("gather_rows: indices must be a flat sequence")
    if idx.size == 0:
        raise ValueError("gather_rows: empty index list")
    if idx.min() < 0 or idx.max() >= t.shape[0]:
        raise IndexError(f"gather_rows: index out of range for {t.shape[0]} rows")
    out = t.values[idx]

    def push(g: np.ndarray):
        dt = np.zeros(t.shape)
        np.add.at(dt, idx, g)
        return (dt,)

    return _attach(out, (t,), push)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a (1, d) bias row to every row of x."""
    xv, bv = x.values, b.values
    if bv.shape != (1, xv.shape[1]):
        raise ShapeMismatchError("add_bias", xv.shape, bv.shape)

    def push(g: np.ndarray):
        db = g.sum(axis=0, keepdims=True) if b.requires_grad else None
        return g, db

    return _attach(xv + bv, (x, b), push)


def slice_cols(t: Tensor, start: int, stop: int) -> Tensor:
    tv = t.values
    if not (0 <= start < stop <= tv.shape[1]):
        raise ShapeMismatchError("slice_cols", tv.shape, (start, stop))
    out = tv[:, start:stop]

    def push(g: np.ndarray):
        dt = np.zeros(tv.shape)
        dt[:, start:stop] = g
        return (dt,)

    return _attach(out, (t,), push)


def _concat(parts: Sequence[Tensor], axis: int, op: str) -> Tensor:
    if not parts:
        raise ValueError(f"{op}: nothing to concatenate")
    other = 1 - axis
    width = parts[0].shape[other]
    for p in parts[1:]:
        if p.shape[other] != width:
            raise ShapeMismatchError(op, parts[0].shape, p.shape)
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def push(g: np.ndarray):
        if axis == 0:
            return tuple(g[bounds[i]:bounds[i + 1], :] for i in range(len(parts)))
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _attach(out, tuple(parts), push)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    return _concat(parts, 0, "concat_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    return _concat(parts, 1, "concat_cols")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise layer normalization with learned gain and bias."""
    xv, gv, bv = x.values, gain.values, bias.values
    d = xv.shape[1]
    if gv.shape != (1, d) or bv.shape != (1, d):
        raise ShapeMismatchError("layer_norm", xv.shape, gv.shape, bv.shape)
    mu = xv.sum(axis=1, keepdims=True) / d
    centered = xv - mu
    var = (centered * centered).sum(axis=1, keepdims=True) / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gv + bv

    def push(g: np.ndarray):
        dxhat = g * gv
        if x.requires_grad:
            row_mean = dxhat.sum(axis=1, keepdims=True) / d
            proj = (dxhat * xhat).sum(axis=1, keepdims=True) / d
            dx = inv * (dxhat - row_mean - xhat * proj)
        else:
            dx = None
        dgain = (g * xhat).sum(axis=0, keepdims=True) if gain.requires_grad else None
        dbias = g.sum(axis=0, keepdims=True) if bias.requires_grad else None
        return dx, dgain, dbias

    return _attach(out, (x, gain, bias), push)


def dropout(t: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return t
    tv = t.values
    mask = (rng.random(tv.shape) >= rate) / (1.0 - rate)

    def push(g: np.ndarray):
        return (g * mask,)

    return _attach(tv * mask, (t,), push)
