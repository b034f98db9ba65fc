"""
Tape-based reverse-mode automatic differentiation
Gradients come back as graph nodes, so a loss that contains an input gradient
(the ensemble-similarity term) can be differentiated again w.r.t. parameters.
"""
import itertools
import logging
from collections import deque
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Shape = Tuple[int, ...]
Axis = Union[None, int, Tuple[int, ...]]

_node_ids = itertools.count()


class AutodiffError(ValueError):
    """Base class for graph construction and differentiation errors"""


class ShapeError(AutodiffError):
    """Operand shapes are incompatible with an op"""

    def __init__(self, op: str, shapes: Sequence[Shape], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        message = f"shape mismatch in '{op}': {self.shapes}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class NonFiniteError(AutodiffError):
    """A node value contains NaN or inf; `path` runs from the root to the offending node"""

    def __init__(self, path: List[str]):
        self.path = path
        super().__init__("non-finite value at " + " <- ".join(path))


class GradientError(AutodiffError):
    """Differentiation requested on something that is not a scalar"""


class Node:
    """
    Immutable graph node.

    The value is computed eagerly when the node is built and is stored as a
    read-only float64 array of rank <= 2. `requires_grad` is set on variable
    leaves and propagates to every node that depends on one.
    """

    __slots__ = ("id", "op", "parents", "value", "requires_grad", "attrs")
    # numpy defers to the reflected operators below instead of building object arrays
    __array_ufunc__ = None

    def __init__(self, op: str, parents: Tuple["Node", ...], value: Tensor,
                 requires_grad: bool, attrs: Optional[dict] = None):
        if value.ndim > 2:
            raise ShapeError(op, [value.shape], "rank above 2 is not supported")
        value.setflags(write=False)
        self.id = next(_node_ids)
        self.op = op
        self.parents = parents
        self.value = value
        self.requires_grad = requires_grad
        self.attrs = attrs or {}

    @property
    def shape(self) -> Shape:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Node":
        return transpose(self)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Node":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Node":
        return reduce_mean(self, axis, keepdims)

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return divide(self, other)
    def __rtruediv__(self, other): return divide(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return negate(self)

    def __getitem__(self, key) -> "Node":
        return take(self, key)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


class GradMap(dict):
    """Maps each differentiated node to its gradient node"""

    def tensor(self, node: Node) -> Tensor:
        return self[node].value

    def tensors(self, nodes: Iterable[Node]) -> List[Tensor]:
        return [self[n].value for n in nodes]


NodeLike = Union[Node, Tensor, float, int]


# ---------------------------------------------------------------------------
# Leaves
# ---------------------------------------------------------------------------

def constant(value) -> Node:
    """Leaf that never receives a gradient"""
    return Node("constant", (), np.array(value, dtype=np.float64), False)


def variable(value) -> Node:
    """Leaf that gradients can be taken with respect to"""
    return Node("constant", (), np.array(value, dtype=np.float64), True)


def as_node(x: NodeLike) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(op: str, parents: Sequence[Node], value: Tensor, **attrs) -> Node:
    requires_grad = any(p.requires_grad for p in parents)
    return Node(op, tuple(parents), np.asarray(value, dtype=np.float64), requires_grad, attrs)


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------

def broadcast(x: NodeLike, shape: Shape) -> Node:
    x = as_node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        value = np.broadcast_to(x.value, shape)
    except ValueError:
        raise ShapeError("broadcast", [x.shape, shape]) from None
    return _make("broadcast", [x], value, shape=shape)


def _align(op: str, a: NodeLike, b: NodeLike) -> Tuple[Node, Node]:
    a, b = as_node(a), as_node(b)
    if a.shape == b.shape:
        return a, b
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape]) from None
    if len(shape) > 2:
        raise ShapeError(op, [a.shape, b.shape], "rank above 2 is not supported")
    return broadcast(a, shape), broadcast(b, shape)


def _keepdims_shape(shape: Shape, axis: Axis) -> Shape:
    if axis is None:
        return tuple(1 for _ in shape)
    axes = (axis,) if isinstance(axis, int) else axis
    axes = {a % len(shape) for a in axes}
    return tuple(1 if i in axes else d for i, d in enumerate(shape))


def _reduce_to(g: Node, shape: Shape) -> Node:
    """Sum a broadcast gradient back down to `shape`"""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    out = g
    if lead > 0:
        out = reduce_sum(out, axis=tuple(range(lead)))
    axes = tuple(i for i, (gd, d) in enumerate(zip(out.shape, shape)) if d == 1 and gd != 1)
    if axes:
        out = reduce_sum(out, axis=axes, keepdims=True)
    return reshape(out, shape)


def reshape(x: NodeLike, shape: Shape) -> Node:
    x = as_node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    if int(np.prod(shape, dtype=np.int64)) != x.value.size:
        raise ShapeError("reshape", [x.shape, shape])
    return _make("reshape", [x], x.value.reshape(shape), shape=shape)


def transpose(x: NodeLike) -> Node:
    x = as_node(x)
    if x.ndim != 2:
        raise ShapeError("transpose", [x.shape], "needs a matrix")
    return _make("transpose", [x], x.value.T)


def _normalize_index(op: str, shape: Shape, key) -> Tuple[slice, ...]:
    key = key if isinstance(key, tuple) else (key,)
    if len(key) > len(shape) or not all(isinstance(k, slice) for k in key):
        raise ShapeError(op, [shape], f"only slice indexing is supported, got {key!r}")
    return key + tuple(slice(None) for _ in range(len(shape) - len(key)))


def take(x: NodeLike, key) -> Node:
    """Slice op (rank preserving)"""
    x = as_node(x)
    index = _normalize_index("slice", x.shape, key)
    return _make("slice", [x], x.value[index], index=index)


def pad(x: NodeLike, index: Tuple[slice, ...], shape: Shape) -> Node:
    """Embed x at `index` of a zero tensor of `shape` (adjoint of slice)"""
    x = as_node(x)
    out = np.zeros(shape)
    try:
        out[index] = x.value
    except ValueError:
        raise ShapeError("pad", [x.shape, shape]) from None
    return _make("pad", [x], out, index=index, shape=tuple(shape))


def concat(xs: Sequence[NodeLike], axis: int = 1) -> Node:
    xs = [as_node(x) for x in xs]
    try:
        value = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", [x.shape for x in xs]) from None
    return _make("concat", xs, value, axis=axis)


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(a: NodeLike, b: NodeLike) -> Node:
    a, b = _align("add", a, b)
    return _make("add", [a, b], a.value + b.value)


def sub(a: NodeLike, b: NodeLike) -> Node:
    a, b = _align("sub", a, b)
    return _make("sub", [a, b], a.value - b.value)


def mul(a: NodeLike, b: NodeLike) -> Node:
    a, b = _align("mul", a, b)
    return _make("mul", [a, b], a.value * b.value)


def divide(a: NodeLike, b: NodeLike) -> Node:
    a, b = _align("divide", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value / b.value
    return _make("divide", [a, b], value)


def negate(x: NodeLike) -> Node:
    x = as_node(x)
    return _make("negate", [x], -x.value)


def minimum(a: NodeLike, b: NodeLike) -> Node:
    """Elementwise min; ties route the gradient to `a`"""
    a, b = _align("minimum", a, b)
    return _make("minimum", [a, b], np.minimum(a.value, b.value))


def matmul(a: NodeLike, b: NodeLike) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim == 1 and b.ndim == 1:
        if a.shape != b.shape:
            raise ShapeError("matmul", [a.shape, b.shape])
        return reduce_sum(mul(a, b))
    if a.ndim == 1 and b.ndim == 2:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), (a.shape[0],))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape])
    return _make("matmul", [a, b], a.value @ b.value)


# ---------------------------------------------------------------------------
# Elementwise functions
# ---------------------------------------------------------------------------

def tanh(x: NodeLike) -> Node:
    x = as_node(x)
    return _make("tanh", [x], np.tanh(x.value))


def relu(x: NodeLike) -> Node:
    x = as_node(x)
    return _make("relu", [x], np.maximum(x.value, 0.0))


def exp(x: NodeLike) -> Node:
    x = as_node(x)
    with np.errstate(over="ignore"):
        value = np.exp(x.value)
    return _make("exp", [x], value)


def log(x: NodeLike) -> Node:
    x = as_node(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(x.value)
    return _make("log", [x], value)


def square(x: NodeLike) -> Node:
    x = as_node(x)
    return _make("square", [x], x.value * x.value)


def sqrt(x: NodeLike) -> Node:
    x = as_node(x)
    with np.errstate(invalid="ignore"):
        value = np.sqrt(x.value)
    return _make("sqrt", [x], value)


def clip(x: NodeLike, low: float, high: float) -> Node:
    x = as_node(x)
    return _make("clip", [x], np.clip(x.value, low, high), low=low, high=high)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def reduce_sum(x: NodeLike, axis: Axis = None, keepdims: bool = False) -> Node:
    x = as_node(x)
    return _make("sum", [x], np.sum(x.value, axis=axis, keepdims=keepdims), axis=axis, keepdims=keepdims)


def reduce_mean(x: NodeLike, axis: Axis = None, keepdims: bool = False) -> Node:
    x = as_node(x)
    return _make("mean", [x], np.mean(x.value, axis=axis, keepdims=keepdims), axis=axis, keepdims=keepdims)


def min_over_axis(x: NodeLike, axis: int = 1, keepdims: bool = True) -> Node:
    """Minimum along one axis; on ties the lowest index receives the full gradient"""
    x = as_node(x)
    if x.ndim == 0:
        raise ShapeError("min_over_axis", [x.shape], "needs at least one axis")
    winner = np.expand_dims(np.argmin(x.value, axis=axis), axis)
    mask = np.zeros(x.shape)
    np.put_along_axis(mask, winner, 1.0, axis=axis)
    value = np.min(x.value, axis=axis, keepdims=keepdims)
    return _make("min_over_axis", [x], value, axis=axis, keepdims=keepdims, mask=mask)


# ---------------------------------------------------------------------------
# Vector-Jacobian products, written with graph ops so they differentiate again
# ---------------------------------------------------------------------------

def _vjp_add(node, g, needs):
    return g, g


def _vjp_sub(node, g, needs):
    return g, (negate(g) if needs[1] else None)


def _vjp_mul(node, g, needs):
    a, b = node.parents
    return (mul(g, b) if needs[0] else None), (mul(g, a) if needs[1] else None)


def _vjp_divide(node, g, needs):
    a, b = node.parents
    ga = divide(g, b) if needs[0] else None
    gb = negate(divide(mul(g, a), square(b))) if needs[1] else None
    return ga, gb


def _vjp_negate(node, g, needs):
    return (negate(g),)


def _vjp_minimum(node, g, needs):
    a, b = node.parents
    mask = (a.value <= b.value).astype(np.float64)
    ga = mul(g, constant(mask)) if needs[0] else None
    gb = mul(g, constant(1.0 - mask)) if needs[1] else None
    return ga, gb


def _vjp_matmul(node, g, needs):
    a, b = node.parents
    ga = matmul(g, transpose(b)) if needs[0] else None
    gb = matmul(transpose(a), g) if needs[1] else None
    return ga, gb


def _vjp_tanh(node, g, needs):
    return (mul(g, sub(1.0, square(node))),)


def _vjp_relu(node, g, needs):
    (x,) = node.parents
    return (mul(g, constant((x.value > 0.0).astype(np.float64))),)


def _vjp_exp(node, g, needs):
    return (mul(g, node),)


def _vjp_log(node, g, needs):
    return (divide(g, node.parents[0]),)


def _vjp_square(node, g, needs):
    return (mul(g, mul(2.0, node.parents[0])),)


def _vjp_sqrt(node, g, needs):
    return (divide(g, mul(2.0, node)),)


def _vjp_clip(node, g, needs):
    (x,) = node.parents
    inside = (x.value >= node.attrs["low"]) & (x.value <= node.attrs["high"])
    return (mul(g, constant(inside.astype(np.float64))),)


def _vjp_sum(node, g, needs):
    (x,) = node.parents
    g = reshape(g, _keepdims_shape(x.shape, node.attrs["axis"]))
    return (broadcast(g, x.shape),)


def _vjp_mean(node, g, needs):
    (x,) = node.parents
    count = x.value.size // max(node.value.size, 1)
    g = reshape(g, _keepdims_shape(x.shape, node.attrs["axis"]))
    return (mul(broadcast(g, x.shape), 1.0 / count),)


def _vjp_min(node, g, needs):
    (x,) = node.parents
    g = reshape(g, _keepdims_shape(x.shape, node.attrs["axis"]))
    return (mul(broadcast(g, x.shape), constant(node.attrs["mask"])),)


def _vjp_broadcast(node, g, needs):
    return (_reduce_to(g, node.parents[0].shape),)


def _vjp_reshape(node, g, needs):
    return (reshape(g, node.parents[0].shape),)


def _vjp_transpose(node, g, needs):
    return (transpose(g),)


def _vjp_slice(node, g, needs):
    return (pad(g, node.attrs["index"], node.parents[0].shape),)


def _vjp_pad(node, g, needs):
    return (take(g, node.attrs["index"]),)


def _vjp_concat(node, g, needs):
    axis = node.attrs["axis"] % node.ndim
    grads, offset = [], 0
    for parent, needed in zip(node.parents, needs):
        width = parent.shape[axis]
        if needed:
            index = tuple(slice(offset, offset + width) if i == axis else slice(None)
                          for i in range(node.ndim))
            grads.append(take(g, index))
        else:
            grads.append(None)
        offset += width
    return tuple(grads)


_VJP: Dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "divide": _vjp_divide,
    "negate": _vjp_negate,
    "minimum": _vjp_minimum,
    "matmul": _vjp_matmul,
    "tanh": _vjp_tanh,
    "relu": _vjp_relu,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "square": _vjp_square,
    "sqrt": _vjp_sqrt,
    "clip": _vjp_clip,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "min_over_axis": _vjp_min,
    "broadcast": _vjp_broadcast,
    "reshape": _vjp_reshape,
    "transpose": _vjp_transpose,
    "slice": _vjp_slice,
    "pad": _vjp_pad,
    "concat": _vjp_concat,
}


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------

def _post_order(root: Node, grad_only: bool) -> List[Node]:
    """Parents before children; iterative so deep graphs do not hit the recursion limit"""
    order: List[Node] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent in reversed(node.parents):
            if parent.id not in seen and (parent.requires_grad or not grad_only):
                stack.append((parent, False))
    return order


def _path_to(root: Node, target: Node) -> List[str]:
    child_of: Dict[int, Node] = {}
    queue = deque([root])
    visited = {root.id}
    while queue:
        node = queue.popleft()
        if node.id == target.id:
            break
        for parent in node.parents:
            if parent.id not in visited:
                visited.add(parent.id)
                child_of[parent.id] = node
                queue.append(parent)
    path = [f"{target.op}#{target.id}"]
    node = target
    while node.id != root.id:
        node = child_of[node.id]
        path.append(f"{node.op}#{node.id}")
    return list(reversed(path))


def evaluate(root: Node) -> Tensor:
    """
    Return the root's value after checking every intermediate is finite.

    Shape errors surface as ShapeError while the graph is being built; a
    non-finite intermediate raises NonFiniteError naming the path from the
    root down to the first node that produced it.
    """
    for node in _post_order(root, grad_only=False):
        if not np.all(np.isfinite(node.value)):
            raise NonFiniteError(_path_to(root, node))
    return root.value


def gradient(output: Node, wrt: Iterable[Node]) -> GradMap:
    """
    Reverse-mode gradient of a scalar output.

    The returned gradients are graph nodes that can be differentiated again.

    Args:
        output: Scalar node to differentiate
        wrt: Nodes to differentiate with respect to

    Returns:
        GradMap from each node in `wrt` to its gradient node; nodes the
        output does not depend on map to zero constants

    Raises:
        GradientError: output is not a scalar
    """
    if output.value.size != 1:
        raise GradientError(f"gradient needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    targets = {w.id for w in wrt}

    relevant = set()
    order = []
    if output.requires_grad:
        for node in _post_order(output, grad_only=True):
            if node.id in targets or any(p.id in relevant for p in node.parents):
                relevant.add(node.id)
                order.append(node)

    pending: Dict[int, List[Node]] = {output.id: [constant(np.ones(output.shape))]}
    totals: Dict[int, Node] = {}
    for node in reversed(order):
        contributions = pending.pop(node.id, None)
        if contributions is None:
            continue
        g = contributions[0]
        for extra in contributions[1:]:
            g = add(g, extra)
        totals[node.id] = g
        if not node.parents:
            continue
        needs = tuple(p.id in relevant for p in node.parents)
        for parent, grad in zip(node.parents, _VJP[node.op](node, g, needs)):
            if grad is not None and parent.id in relevant:
                pending.setdefault(parent.id, []).append(grad)

    result = GradMap()
    for w in wrt:
        result[w] = totals[w.id] if w.id in totals else constant(np.zeros(w.shape))
    return result


def second_gradient(output: Node, inner_wrt: Node, outer_wrt: Iterable[Node],
                    reduce: Optional[Callable[[Node], Node]] = None) -> GradMap:
    """
    Differentiate a scalar function of d(output)/d(inner_wrt) w.r.t. `outer_wrt`.

    `reduce` maps the inner gradient to a scalar and defaults to its sum, so
    for a scalar x this is the plain second derivative.
    """
    inner = gradient(output, [inner_wrt])[inner_wrt]
    scalar = reduce(inner) if reduce is not None else reduce_sum(inner)
    return gradient(scalar, outer_wrt)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_gradient(f: Callable[[Node], Node], x: Tensor, step: float) -> Tensor:
    """Central differences of a scalar graph function, one coordinate at a time"""
    x = np.array(x, dtype=np.float64)
    numeric = np.zeros_like(x)
    for i in range(x.size):
        plus, minus = x.copy(), x.copy()
        plus.flat[i] += step
        minus.flat[i] -= step
        f_plus = float(np.sum(evaluate(f(constant(plus)))))
        f_minus = float(np.sum(evaluate(f(constant(minus)))))
        numeric.flat[i] = (f_plus - f_minus) / (2.0 * step)
    return numeric


def finite_difference_check(f: Callable[[Node], Node], x: Tensor, step: float = 1e-5,
                            atol: float = 0.0) -> float:
    """
    Max over coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-12).

    Coordinates where both magnitudes are below `atol` count as agreeing.
    """
    xv = variable(x)
    out = f(xv)
    evaluate(out)
    analytic = gradient(out, [xv]).tensor(xv)
    numeric = finite_difference_gradient(f, x, step)
    error = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    if atol > 0.0:
        error[(np.abs(analytic) < atol) & (np.abs(numeric) < atol)] = 0.0
    return float(error.max()) if error.size else 0.0
