"""
Minimal reverse-mode automatic differentiation over dense float64 tensors.

A Graph is an append-only tape. Every primitive appends one node holding its
input node ids and a backward closure; backward walks the tape in reverse id
order, which is a valid reverse topological order because inputs always
precede their consumers. Tensors without a node are constants: an op whose
inputs are all constants records nothing.

There is no broadcasting. Shape mismatches raise ShapeError.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import GraphError, NumericError, ShapeError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Shape-tagged float64 array, optionally attached to a Graph node."""

    __slots__ = ("value", "node_id", "graph")

    def __init__(self, value: np.ndarray, node_id: Optional[int] = None, graph: "Optional[Graph]" = None):
        self.value = value
        self.node_id = node_id
        self.graph = graph

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> Tuple[float, ...]:
        return tuple(float(v) for v in self.value.ravel())

    @property
    def is_constant(self) -> bool:
        return self.node_id is None

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        kind = "const" if self.is_constant else f"node={self.node_id}"
        return f"Tensor(shape={self.shape}, {kind})"


@dataclass
class Node:
    op: str
    inputs: Tuple[int, ...]
    backward: Optional[BackwardFn]
    stop: bool = False


class Graph:
    """Append-only tape rebuilt for every training step."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.gradients: Dict[int, np.ndarray] = {}

    def _append(self, node: Node) -> int:
        for i in node.inputs:
            if i >= len(self.nodes):
                raise GraphError(f"node input {i} does not precede node {len(self.nodes)}")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value: np.ndarray) -> Tensor:
        """Register a trainable leaf. The tensor shares storage with `value`."""
        if not isinstance(value, np.ndarray) or value.dtype != np.float64:
            raise ShapeError("leaf values must be float64 numpy arrays")
        node_id = self._append(Node("leaf", (), None))
        return Tensor(value, node_id, self)

    def record(self, op: str, inputs: Sequence[Tensor], value: np.ndarray,
               backward: Optional[BackwardFn], stop: bool = False) -> Tensor:
        ids = tuple(t.node_id if t.node_id is not None else -1 for t in inputs)
        node_id = self._append(Node(op, ids, backward, stop))
        return Tensor(value, node_id, self)

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """Populate gradients of `loss` for every node reachable from it."""
        if loss.graph is not self or loss.node_id is None:
            raise GraphError("loss does not belong to this graph")
        if loss.value.size != 1 or loss.value.ndim > 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.value)}
        for node_id in range(loss.node_id, -1, -1):
            g = grads.get(node_id)
            if g is None:
                continue
            node = self.nodes[node_id]
            if node.stop or node.backward is None:
                continue
            input_grads = node.backward(g)
            for input_id, ig in zip(node.inputs, input_grads):
                if input_id < 0 or ig is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + ig
                else:
                    grads[input_id] = ig
        self.gradients = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        if t.node_id is None or t.node_id not in self.gradients:
            return np.zeros_like(t.value)
        return self.gradients[t.node_id]


def tensor(shape: Sequence[int], data: Sequence[float]) -> Tensor:
    """Build a constant tensor from a shape and flat row-major data."""
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape):
        raise ShapeError(f"dimensions must be positive, got {shape}")
    values = np.asarray(data, dtype=np.float64).reshape(-1)
    expected = int(np.prod(shape)) if shape else 1
    if values.size != expected:
        raise ShapeError(f"shape {shape} needs {expected} values, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise NumericError("tensor data must be finite")
    return Tensor(values.reshape(shape))


def constant(array: np.ndarray) -> Tensor:
    value = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NumericError("constant data must be finite")
    return Tensor(value)


def _graph_of(inputs: Sequence[Tensor]) -> Optional[Graph]:
    graph = None
    for t in inputs:
        if t.graph is None:
            continue
        if graph is None:
            graph = t.graph
        elif t.graph is not graph:
            raise GraphError("inputs belong to different graphs")
    return graph


def _emit(op: str, inputs: Sequence[Tensor], value: np.ndarray, backward: BackwardFn,
          stop: bool = False) -> Tensor:
    graph = _graph_of(inputs)
    if graph is None:
        return Tensor(value)
    return graph.record(op, inputs, value, backward, stop)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# Elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.value + b.value, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.value - b.value, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul_elementwise", a, b)
    av, bv = a.value, b.value
    return _emit("mul_elementwise", (a, b), av * bv, lambda g: (g * bv, g * av))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise NumericError("div: division by zero")
    return _emit("div", (a, b), av / bv, lambda g: (g / bv, -g * av / (bv * bv)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.value * c, lambda g: (g * c,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("maximum", a, b)
    # NaN on either side wins
    take_a = (a.value >= b.value) | np.isnan(a.value)
    return _emit("maximum", (a, b), np.where(take_a, a.value, b.value),
                 lambda g: (np.where(take_a, g, 0.0), np.where(take_a, 0.0, g)))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("minimum", a, b)
    take_a = (a.value <= b.value) | np.isnan(a.value)
    return _emit("minimum", (a, b), np.where(take_a, a.value, b.value),
                 lambda g: (np.where(take_a, g, 0.0), np.where(take_a, 0.0, g)))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0; NaN passes through
    active = a.value > 0
    keep = active | np.isnan(a.value)
    return _emit("relu", (a,), np.where(keep, a.value, 0.0), lambda g: (np.where(active, g, 0.0),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.value)
    if not np.all(np.isfinite(y)):
        raise NumericError("exp produced a non-finite value")
    return _emit("exp", (a,), y, lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.value
    if np.any(x <= 0):
        raise NumericError("log of a non-positive value")
    return _emit("log", (a,), np.log(x), lambda g: (g / x,))


# Linear algebra and layout

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul needs 2-D inputs, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _emit("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def concat_lastaxis(*parts: Tensor) -> Tensor:
    if not parts:
        raise ShapeError("concat needs at least one input")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.value.ndim != parts[0].value.ndim or p.shape[:-1] != lead:
            raise ShapeError(f"concat: leading dims disagree: {[q.shape for q in parts]}")
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_lastaxis", parts, np.concatenate([p.value for p in parts], axis=-1), backward)


def slice_lastaxis(a: Tensor, start: int, stop: int) -> Tensor:
    width = a.shape[-1]
    if not 0 <= start < stop <= width:
        raise ShapeError(f"slice [{start}:{stop}] out of range for width {width}")
    in_shape = a.shape

    def backward(g):
        full = np.zeros(in_shape)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice_lastaxis", (a,), a.value[..., start:stop], backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.value.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    in_shape = a.shape
    return _emit("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(in_shape),))


# Reductions

def reduce_sum(a: Tensor) -> Tensor:
    in_shape = a.shape
    return _emit("sum", (a,), np.asarray(a.value.sum()), lambda g: (np.full(in_shape, float(g)),))


def reduce_mean(a: Tensor) -> Tensor:
    in_shape = a.shape
    n = a.value.size
    return _emit("mean", (a,), np.asarray(a.value.mean()), lambda g: (np.full(in_shape, float(g) / n),))


def softmax_lastaxis(a: Tensor) -> Tensor:
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_lastaxis", (a,), y, backward)


def log_softmax_lastaxis(a: Tensor) -> Tensor:
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    probs = np.exp(y)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax_lastaxis", (a,), y, backward)


def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity; backward sends nothing into `a`."""
    return _emit("stop_gradient", (a,), a.value, lambda g: (None,), stop=True)


PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "matmul": matmul,
    "relu": relu,
    "softmax_lastaxis": softmax_lastaxis,
    "concat_lastaxis": concat_lastaxis,
    "mean": reduce_mean,
    "sum": reduce_sum,
    "div": div,
    "exp": exp,
    "log": log,
    "maximum": maximum,
    "minimum": minimum,
    "log_softmax_lastaxis": log_softmax_lastaxis,
}


def primitive(op: str, *inputs: Tensor) -> Tensor:
    """Apply a named primitive to tensors."""
    fn = PRIMITIVES.get(op)
    if fn is None:
        raise GraphError(f"unknown primitive {op!r}")
    return fn(*inputs)


def check_gradients(build_loss: Callable[[Graph, List[Tensor]], Tensor],
                    params: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """
    Compare backward against central differences for every coordinate of
    every parameter and return the max relative error. Below magnitude 1e-6
    the absolute error is used instead. Parameters are restored afterwards.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")

    def evaluate() -> float:
        g = Graph()
        leaves = [g.leaf(p) for p in params]
        return build_loss(g, leaves).item()

    first, second = evaluate(), evaluate()
    if first != second:
        raise GraphError(f"build_loss is not deterministic ({first!r} != {second!r})")

    graph = Graph()
    leaves = [graph.leaf(p) for p in params]
    graph.backward(build_loss(graph, leaves))
    analytic = [graph.grad(t).copy() for t in leaves]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.reshape(-1)
        grad_flat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            try:
                flat[i] = original + eps
                plus = evaluate()
                flat[i] = original - eps
                minus = evaluate()
            finally:
                flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = float(grad_flat[i])
            scale_ = max(abs(a), abs(numeric))
            err = abs(a - numeric) if scale_ < 1e-6 else abs(a - numeric) / scale_
            if math.isnan(err):
                raise NumericError("gradient check produced NaN")
            worst = max(worst, err)
    logger.debug(f"gradient check over {sum(p.size for p in params)} coordinates: max error {worst:.3e}")
    return worst
