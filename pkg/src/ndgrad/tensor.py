"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are only recorded while a :class:`Graph` is active on the current
thread::

    with Graph() as tape:
        loss = losses("mse", net(x), y)
    tape.backward(loss)

Outside a graph every op is a plain numpy computation, which is what the
evaluation paths rely on.
"""
import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from ndgrad.errors import AxisError, NdgradError, NonScalarRootError, ShapeMismatchError

logger = logging.getLogger(__name__)

_node_ids = itertools.count()
_local = threading.local()

UNARY_KINDS = ("neg", "relu", "sigmoid", "exp", "log", "tanh")
BINARY_KINDS = ("add", "sub", "mul", "div")
REDUCE_KINDS = ("sum", "mean", "max")


class Tensor:
    """n-dimensional float64 array with an optional gradient buffer."""

    def __init__(self, data, requires_grad=False, copy=True):
        self.data = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.node_id = next(_node_ids)
        self.is_leaf = True
        self.domain_error = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, copy=False)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, node={self.node_id})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class OpRecord:
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    saved: dict = field(default_factory=dict)


class Graph:
    """Ordered tape of recorded operations.

    Records are appended in execution order, so every input of record k was
    produced by an earlier record or is a leaf.
    """

    def __init__(self):
        self.records: List[OpRecord] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        _local.stack.pop()

    def __len__(self):
        return len(self.records)

    @staticmethod
    def current() -> Optional["Graph"]:
        stack = getattr(_local, "stack", None)
        return stack[-1] if stack else None

    def record(self, record: OpRecord):
        self.records.append(record)

    def backward(self, root: Tensor) -> Dict[int, np.ndarray]:
        return backward(root, self)


def backward(root: Tensor, graph: Optional[Graph] = None) -> Dict[int, np.ndarray]:
    """Accumulate d(root)/d(leaf) into every tracked leaf reachable from root.

    Returns a map node-id -> gradient for the leaves that received one.
    Intermediate tensors get their gradient assigned, leaves accumulate, so
    repeated calls without ``zero_grad`` add up.
    """
    if root.data.size != 1:
        raise NonScalarRootError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    if root.is_leaf:
        root.grad = root.grad + np.ones_like(root.data)
        return {root.node_id: np.ones_like(root.data)}
    graph = graph if graph is not None else getattr(root, "_graph", None)
    if graph is None:
        raise NdgradError("root tensor is not on a graph")

    grads: Dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    leaves: Dict[int, Tensor] = {}
    for record in reversed(graph.records):
        g = grads.pop(record.output.node_id, None)
        if g is None:
            continue
        record.output.grad = g
        for tensor, g_in in zip(record.inputs, record.vjp(g)):
            if g_in is None or not tensor.requires_grad:
                continue
            if tensor.is_leaf:
                leaves[tensor.node_id] = tensor
            if tensor.node_id in grads:
                grads[tensor.node_id] = grads[tensor.node_id] + g_in
            else:
                grads[tensor.node_id] = g_in

    result = {}
    for node_id, tensor in leaves.items():
        g = grads.get(node_id)
        if g is None:
            continue
        tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
        result[node_id] = g
    return result


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _emit(kind, inputs, data, vjp, **saved) -> Tensor:
    graph = Graph.current()
    tracked = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, copy=False)
    out.domain_error = any(t.domain_error for t in inputs)
    if tracked:
        out.requires_grad = True
        out.is_leaf = False
        out.grad = None
        out._graph = graph
        graph.record(OpRecord(kind, tuple(inputs), out, vjp, saved))
    return out


def _broadcast_shape(a_shape, b_shape):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeMismatchError(f"shapes {a_shape} and {b_shape} do not broadcast") from None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def elementwise(kind: str, a, b=None) -> Tensor:
    a = as_tensor(a)
    if kind in BINARY_KINDS:
        if b is None:
            raise NdgradError(f"{kind} needs two operands")
        b = as_tensor(b)
        _broadcast_shape(a.shape, b.shape)
        return _binary(kind, a, b)
    if kind in UNARY_KINDS:
        return _unary(kind, a)
    raise NdgradError(f"unknown elementwise op {kind!r}")


def _binary(kind, a, b):
    x, y = a.data, b.data
    if kind == "add":
        out = x + y

        def vjp(g):
            return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)
    elif kind == "sub":
        out = x - y

        def vjp(g):
            return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)
    elif kind == "mul":
        out = x * y

        def vjp(g):
            return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = x / y

        def vjp(g):
            return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)
    return _emit(kind, (a, b), out, vjp)


def _unary(kind, a):
    x = a.data
    flagged = False
    if kind == "neg":
        out = -x

        def vjp(g):
            return (-g,)
    elif kind == "relu":
        out = np.maximum(x, 0.0)

        def vjp(g):
            return (g * (x > 0),)
    elif kind == "sigmoid":
        out = expit(x)

        def vjp(g):
            return (g * out * (1.0 - out),)
    elif kind == "exp":
        out = np.exp(x)

        def vjp(g):
            return (g * out,)
    elif kind == "tanh":
        out = np.tanh(x)

        def vjp(g):
            return (g * (1.0 - out * out),)
    else:
        flagged = bool((x <= 0).any())
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x)
        if flagged:
            logger.warning("log of non-positive value; NaN/-inf propagated")

        def vjp(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                return (g / x,)
    result = _emit(kind, (a,), out, vjp)
    result.domain_error = result.domain_error or flagged
    return result


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def div(a, b):
    return elementwise("div", a, b)


def neg(a):
    return elementwise("neg", a)


def relu(a):
    return elementwise("relu", a)


def sigmoid(a):
    return elementwise("sigmoid", a)


def exp(a):
    return elementwise("exp", a)


def log(a):
    return elementwise("log", a)


def tanh(a):
    return elementwise("tanh", a)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul of {a.shape} and {b.shape}")
    x, y = a.data, b.data

    def vjp(g):
        return g @ y.T, x.T @ g

    return _emit("matmul", (a, b), x @ y, vjp)


def reduce(kind: str, x, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    if kind not in REDUCE_KINDS:
        raise NdgradError(f"unknown reduction {kind!r}")
    data = x.data
    if axis is not None:
        if not -data.ndim <= axis < data.ndim:
            raise AxisError(f"axis {axis} out of range for shape {x.shape}")
        axis = axis % data.ndim
    count = data.size if axis is None else data.shape[axis]

    if kind == "sum":
        out = data.sum(axis=axis)
    elif kind == "mean":
        out = data.mean(axis=axis)
    else:
        out = data.max(axis=axis)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        if kind == "sum":
            return (np.broadcast_to(g, data.shape).copy(),)
        if kind == "mean":
            return (np.broadcast_to(g / count, data.shape).copy(),)
        peak = out if axis is None else np.expand_dims(out, axis)
        mask = data == peak
        ties = mask.sum() if axis is None else mask.sum(axis=axis, keepdims=True)
        return (g * mask / ties,)

    return _emit(kind, (x,), np.asarray(out, dtype=np.float64), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    original = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"cannot reshape {original} to {shape}") from None

    def vjp(g):
        return (g.reshape(original),)

    return _emit("reshape", (x,), out, vjp)


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(tensors), out, vjp)
