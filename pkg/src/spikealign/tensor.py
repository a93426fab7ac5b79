"""Dense float tensors with a reverse-mode gradient tape.

Every forward op checks its result for NaN/Inf and raises
:class:`NumericError` naming the op.  Reductions accumulate in float64 and
cast back to the operand dtype.  Gradients accumulate additively into
``Tensor.grad``; callers zero them between steps.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericError

DEFAULT_DTYPE = np.float32

_state = threading.local()
_seq = itertools.count()


def _graph_stack() -> list:
    if not hasattr(_state, "graphs"):
        _state.graphs = []
    return _state.graphs


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One recorded op: its inputs and a closure mapping output grad to input grads."""

    __slots__ = ("op", "inputs", "backward_fn", "seq")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)


class Graph:
    """Records nodes in forward execution order while active.

    ``seed`` drives :attr:`rng`, the only randomness source for stochastic
    ops run inside the graph.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack().pop()


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            dtype = DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, copy=True)
        if not np.isfinite(arr).all():
            raise NumericError("tensor: non-finite values in input data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, node: Node | None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = node
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False, None)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def backward(self, graph: Graph | None = None) -> dict:
        return backward(self, graph)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor._wrap(np.asarray(x, dtype=dtype), False, None)


def _finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values in output")
    return arr


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    _finite(op, out)
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    if not needs:
        return Tensor._wrap(out, False, None)
    node = Node(op, tuple(inputs), backward_fn)
    stack = _graph_stack()
    if stack:
        stack[-1].nodes.append(node)
    return Tensor._wrap(out, True, node)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _binary(op: str, a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a)
    _broadcast_check(op, a, b)
    return a, b


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _binary("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _binary("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _binary("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: argument must be strictly positive")
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("sqrt: argument must be strictly positive")
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g / (2 * out),))


# -- reductions ----------------------------------------------------------------


def _axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ContractError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def _expand_like(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise DomainError("sum: empty axis")
    out = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape
    return _record("sum", np.asarray(out), (a,),
                   lambda g: (np.array(_expand_like(g, shape, axes, keepdims)),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if n == 0:
        raise DomainError("mean: empty axis")
    out = np.mean(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape
    inv = a.dtype.type(1.0 / n)
    return _record("mean", np.asarray(out), (a,),
                   lambda g: (np.array(_expand_like(g, shape, axes, keepdims)) * inv,))


def max_index(a: Tensor | np.ndarray, axis: int = -1) -> np.ndarray:
    """Index of the first maximum along ``axis``; not differentiable."""
    arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    if arr.ndim == 0 or arr.shape[axis] == 0:
        raise DomainError("max_index: empty axis")
    return np.argmax(arr, axis=axis)


# -- linear algebra and shape ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for rank >= 2 operands; leading dims broadcast numpy-style."""
    a, b = _binary_mm(a, b)
    ad, bd = a.data, b.data
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.matmul(ad, bd)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", out, (a, b), backward)


def _binary_mm(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must have rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None
    return a, b


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; gradient scatters back with accumulation."""
    index = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("take_rows: table must be 2-D")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ContractError("take_rows: index out of range")
    rows = table.shape

    def backward(g):
        out = np.zeros(rows, dtype=g.dtype)
        np.add.at(out, index.reshape(-1), g.reshape(-1, rows[1]))
        return (out,)

    return _record("take_rows", table.data[index], (table,), backward)


# -- fused normalisations -------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(a.dtype)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True, dtype=np.float64).astype(out.dtype)
        return (out * (g - dot),)

    return _record("softmax", out, (a,), backward)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    sq = np.sum(np.square(a.data, dtype=np.float64), axis=axis, keepdims=True)
    if np.any(sq == 0):
        raise DomainError("l2_normalize: zero-norm vector")
    norm = np.sqrt(sq)
    out = (a.data / norm).astype(a.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        u = a.data / norm
        proj = np.sum(g64 * u, axis=axis, keepdims=True)
        return (((g64 - u * proj) / norm).astype(a.dtype),)

    return _record("l2_normalize", out, (a,), backward)


# -- backward -----------------------------------------------------------------------


def _collect(loss: Tensor) -> list[Node]:
    seen: set[int] = set()
    nodes: list[Node] = []
    stack = [loss._node]
    while stack:
        node = stack.pop()
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(inp._node for inp in node.inputs)
    nodes.sort(key=lambda n: n.seq)
    return nodes


def backward(loss: Tensor, graph: Graph | None = None) -> dict:
    """Propagate d(loss)/d(leaf) into every ``requires_grad`` leaf.

    Nodes are visited once each in reverse forward order.  Returns a map
    from leaf tensor to the gradient contributed by this call.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._node is None:
        return {}
    nodes = graph.nodes if graph is not None else _collect(loss)
    pending: dict[int, np.ndarray] = {id(loss._node): np.ones(loss.shape, dtype=loss.dtype)}
    contributed: dict[Tensor, np.ndarray] = {}
    for node in reversed(nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = _unbroadcast(np.asarray(gi, dtype=inp.dtype), inp.shape)
            if not np.isfinite(gi).all():
                raise NumericError(f"{node.op}: non-finite gradient")
            if inp._node is not None:
                key = id(inp._node)
                pending[key] = pending[key] + gi if key in pending else gi
            else:
                if inp.grad is None:
                    inp.grad = np.zeros(inp.shape, dtype=inp.dtype)
                inp.grad += gi
                contributed[inp] = contributed[inp] + gi if inp in contributed else gi.copy()
    return contributed


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
