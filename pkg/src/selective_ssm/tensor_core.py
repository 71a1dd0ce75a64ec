"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a closure mapping the output cotangent to cotangents of the
inputs. :func:`backward` sorts the reachable nodes topologically and
accumulates gradients into every leaf created with ``requires_grad=True``.

When no input requires a gradient, nothing is recorded, so inference through
the same code path carries no graph overhead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "as_tensor",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "softplus",
    "silu",
    "relu",
    "sigmoid",
    "matmul",
    "tsum",
    "reshape",
    "transpose",
    "concat",
    "take_rows",
    "getitem",
    "softmax_cross_entropy",
    "custom_op",
    "build_graph",
    "backward",
    "np_softplus",
    "np_sigmoid",
    "broadcast_shape",
]


def broadcast_shape(*shapes: Sequence[int]) -> tuple[int, ...]:
    """Broadcast shape under trailing-dimension rules; raises ValueError."""
    try:
        return tuple(np.broadcast_shapes(*[tuple(s) for s in shapes]))
    except ValueError as exc:
        raise ValueError(f"shapes {list(shapes)} are not broadcastable") from exc


def np_softplus(x):
    """ln(1 + e^x), using x + ln(1 + e^{-x}) above 20."""
    x = np.asarray(x, dtype=np.float64)
    big = x > 20.0
    out = np.empty_like(x)
    out[big] = x[big] + np.log1p(np.exp(-x[big]))
    xs = x[~big]
    out[~big] = np.log1p(np.exp(xs))
    return out


def np_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tensor:
    """A float64 array node in a dynamic computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *, parents=(), backward_fn=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def custom_op(inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable[[np.ndarray], Sequence], op: str) -> Tensor:
    """Create a node with a hand-written vector-Jacobian product.

    ``vjp(g)`` returns one cotangent (or None) per input.
    """
    inputs = tuple(inputs)
    if not any(t.requires_grad for t in inputs):
        return Tensor(out, op=op)
    return Tensor(out, True, parents=inputs, backward_fn=vjp, op=op)


_UNARY = {
    "exp": (np.exp, lambda x, y: y),
    "softplus": (np_softplus, lambda x, y: np_sigmoid(x)),
    "sigmoid": (np_sigmoid, lambda x, y: y * (1.0 - y)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "silu": (lambda x: x * np_sigmoid(x), lambda x, y: (lambda s: s * (1.0 + x * (1.0 - s)))(np_sigmoid(x))),
    "log": (np.log, lambda x, y: 1.0 / x),
    "neg": (np.negative, lambda x, y: -np.ones_like(x)),
    "identity": (lambda x: x.copy(), lambda x, y: np.ones_like(x)),
}


def _unary(name: str, a) -> Tensor:
    a = as_tensor(a)
    f, df = _UNARY[name]
    y = f(a.data)
    x = a.data
    return custom_op((a,), y, lambda g: (g * df(x, y),), name)


def _binary(name: str, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    x, z = a.data, b.data
    if name == "add":
        y = x + z
        vjp = lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, z.shape))
    elif name == "sub":
        y = x - z
        vjp = lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, z.shape))
    elif name == "mul":
        y = x * z
        vjp = lambda g: (_unbroadcast(g * z, x.shape), _unbroadcast(g * x, z.shape))
    elif name == "div":
        y = x / z
        vjp = lambda g: (_unbroadcast(g / z, x.shape), _unbroadcast(-g * x / (z * z), z.shape))
    else:
        raise ValueError(f"unknown binary op {name!r}")
    return custom_op((a, b), y, vjp, name)


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply a named pointwise op; binary ops broadcast by trailing dimensions."""
    if op in ("add", "sub", "mul", "div"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _binary(op, a, b)
    if op not in _UNARY:
        raise ValueError(f"unknown op {op!r}")
    return _unary(op, a)


def add(a, b):
    return _binary("add", a, b)


def sub(a, b):
    return _binary("sub", a, b)


def mul(a, b):
    return _binary("mul", a, b)


def div(a, b):
    return _binary("div", a, b)


def neg(a):
    return _unary("neg", a)


def exp(a):
    return _unary("exp", a)


def log(a):
    return _unary("log", a)


def softplus(a):
    return _unary("softplus", a)


def silu(a):
    return _unary("silu", a)


def relu(a):
    return _unary("relu", a)


def sigmoid(a):
    return _unary("sigmoid", a)


def matmul(a, b) -> Tensor:
    """Matrix product. Leading dimensions of ``a`` act as a batch when ``b`` is 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2:
        raise ValueError(f"matmul expects (..., k) @ (k, n); got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    x, w = a.data, b.data
    y = x @ w

    def vjp(g):
        gx = g @ w.T
        x2 = x.reshape(-1, x.shape[-1])
        gw = x2.T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return custom_op((a, b), y, vjp, "matmul")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % len(shape) for ax in axes)
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op((a,), np.asarray(y, dtype=np.float64), vjp, "sum")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return custom_op((a,), a.data.reshape(shape), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return custom_op((a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    y = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return custom_op(ts, y, vjp, "concat")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    y = a.data[idx]
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return custom_op((a,), np.array(y, dtype=np.float64), vjp, "getitem")


def take_rows(table, ids) -> Tensor:
    """Gather rows of a 2-D table by integer ids (embedding lookup)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"row ids must lie in [0, {table.shape[0]})")
    y = table.data[ids]
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return custom_op((table,), y, vjp, "take_rows")


def softmax_cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean of -log softmax(logits)[target] over positions where mask is true."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError("logits must be batch x classes")
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if targets.shape != (n,) or mask.shape != (n,):
        raise ValueError("targets and mask must have one entry per row")
    if not mask.any():
        raise ValueError("all positions are masked")
    if np.any((targets[mask] < 0) | (targets[mask] >= c)):
        raise ValueError(f"targets must lie in [0, {c})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    safe_t = np.where(mask, targets, 0)
    nll = lse - z[np.arange(n), safe_t]
    m = mask.sum()
    loss = np.sum(nll[mask]) / m

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), safe_t] -= 1.0
        p *= (mask / m)[:, None]
        return (g * p,)

    return custom_op((logits,), np.asarray(loss), vjp, "softmax_cross_entropy")


@dataclass
class Graph:
    """Nodes reachable from an output, in topological order (inputs first)."""

    nodes: list = field(default_factory=list)

    def index(self) -> dict:
        return {id(n): i for i, n in enumerate(self.nodes)}

    def check_order(self) -> bool:
        pos = self.index()
        return all(pos[id(p)] < i for i, n in enumerate(self.nodes) for p in n.parents if id(p) in pos)

    def parameters(self) -> list:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def build_graph(out: Tensor) -> Graph:
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return Graph(order)


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every parameter leaf."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    graph = graph if graph is not None else build_graph(loss)
    cot = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = cot.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        grads = node.backward_fn(g)
        for p, gp in zip(node.parents, grads):
            if gp is None or not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=np.float64)
            if gp.shape != p.shape:
                gp = _unbroadcast(gp, p.shape).reshape(p.shape)
            k = id(p)
            cot[k] = gp if k not in cot else cot[k] + gp
    return graph
