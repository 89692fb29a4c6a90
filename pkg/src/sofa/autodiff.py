"""Small reverse-mode differentiation engine on top of numpy.

Every op returns a :class:`Node` that remembers its parents and a closure
computing the vector-Jacobian product.  :func:`backward` replays the graph in
reverse topological order.  This is just enough machinery to train a GRU,
a few affine layers and the losses in :mod:`sofa.losses`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class FrozenParameterError(RuntimeError):
    """A parameter marked frozen received a gradient."""


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    __slots__ = ("value", "grad", "parents", "vjp", "op", "requires_grad", "name")

    def __init__(self, value, parents: tuple[Node, ...] = (), vjp: VJP | None = None,
                 op: str = "const", requires_grad: bool | None = None, name: str | None = None):
        value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{op} produced non-finite values")
        self.value = value
        self.grad = np.zeros_like(value)
        self.parents = parents
        self.vjp = vjp
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def parameter(value, name: str | None = None) -> Node:
    """Leaf node that accumulates gradient."""
    value = np.array(value)
    if value.dtype.kind != "f":
        value = value.astype(np.float64)
    return Node(value, requires_grad=True, op="param", name=name)


def const(value, dtype=None) -> Node:
    value = np.asarray(value, dtype=dtype)
    return Node(value, requires_grad=False)


def as_node(x, dtype=None) -> Node:
    if isinstance(x, Node):
        return x
    return const(x, dtype=dtype)


def _lift(a, b) -> tuple[Node, Node]:
    if isinstance(a, Node) and not isinstance(b, Node):
        return a, const(b, dtype=a.dtype)
    if isinstance(b, Node) and not isinstance(a, Node):
        return const(a, dtype=b.dtype), b
    return as_node(a), as_node(b)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Node, b: Node) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Node:
    a, b = _lift(a, b)
    _broadcast_shape("add", a, b)
    return Node(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = _lift(a, b)
    _broadcast_shape("sub", a, b)
    return Node(a.value - b.value, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Node:
    a, b = _lift(a, b)
    _broadcast_shape("mul", a, b)
    return Node(a.value * b.value, (a, b),
                lambda g: (_unbroadcast(g * b.value, a.shape),
                           _unbroadcast(g * a.value, b.shape)), "mul")


def scale(a: Node, factor: float) -> Node:
    """Multiply by a python scalar that is not part of the graph."""
    return Node(a.value * factor, (a,), lambda g: (g * factor,), "scale")


def matmul(a, b) -> Node:
    a, b = _lift(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return Node(a.value @ b.value, (a, b),
                lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def sigmoid(a: Node) -> Node:
    x = a.value
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return Node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Node) -> Node:
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise NonFiniteError("log: non-positive input")
    return Node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum(a: Node, axis: int | None = None, keepdims: bool = False) -> Node:  # noqa: A001
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Node(out, (a,), vjp, "sum")


def mean(a: Node, axis: int | None = None, keepdims: bool = False) -> Node:
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    ref = nodes[0]
    ax = axis % ref.value.ndim
    for n in nodes[1:]:
        if n.value.ndim != ref.value.ndim or any(
                n.shape[d] != ref.shape[d] for d in range(ref.value.ndim) if d != ax):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {n.shape}")
    sizes = [n.shape[ax] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(nodes)))

    return Node(np.concatenate([n.value for n in nodes], axis=ax), tuple(nodes), vjp, "concat")


def take(a: Node, index) -> Node:
    """Basic or advanced indexing; gradient scatters back with accumulation."""
    out = a.value[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)

    def vjp(g):
        full = np.zeros_like(a.value)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Node(np.array(out, copy=True), (a,), vjp, "slice")


def reshape(a: Node, shape: tuple[int, ...]) -> Node:
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return Node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return Node(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


# ---------------------------------------------------------------------------
# fused ops along the last axis
# ---------------------------------------------------------------------------

def l2_normalize(a: Node, eps: float = 1e-12) -> Node:
    x = a.value
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x / norm

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * dot) / norm,)

    return Node(out, (a,), vjp, "l2_normalize")


def log_softmax(a: Node) -> Node:
    x = a.value
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return Node(out, (a,), lambda g: (g - probs * g.sum(axis=-1, keepdims=True),),
                "log_softmax")


def softmax(a: Node) -> Node:
    x = a.value
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Node(out, (a,), vjp, "softmax")


def masked_logsumexp(a: Node, mask) -> Node:
    """log(sum_j exp(a[..., j])) over entries where ``mask`` is true.

    Every row needs at least one selected entry.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_logsumexp: mask shape {mask.shape} != input shape {a.shape}")
    if not np.all(mask.any(axis=-1)):
        raise ValueError("masked_logsumexp: a row has no selected entries")
    x = np.where(mask, a.value, -np.inf)
    peak = x.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(x - peak), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    out = (np.log(total) + peak)[..., 0]
    weights = e / total
    return Node(out, (a,), lambda g: (weights * g[..., None],), "masked_logsumexp")


def pairwise_sq_dists(a: Node, b: Node) -> Node:
    """Matrix of squared euclidean distances between rows of ``a`` and ``b``."""
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sq_dists: incompatible shapes {a.shape} and {b.shape}")
    diff = a.value[:, None, :] - b.value[None, :, :]
    out = (diff * diff).sum(axis=-1)

    def vjp(g):
        weighted = 2.0 * g[:, :, None] * diff
        return weighted.sum(axis=1), -weighted.sum(axis=0)

    return Node(out, (a, b), vjp, "pairwise_sq_dists")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every reachable node.

    Gradients are added to whatever is already stored, so calling this twice
    on the same graph doubles every gradient.
    """
    if root.value.size != 1 or root.value.ndim > 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        root.grad = root.grad + 1.0
        return
    order = _topological_order(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = node.grad + g
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = np.asarray(pg, dtype=parent.value.dtype).reshape(parent.shape)


# ---------------------------------------------------------------------------
# parameters and optimisation
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered collection of named parameters plus Adam state."""

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self._nodes: dict[str, Node] = {}
        self.step_count = 0
        self.first_moment: dict[str, np.ndarray] = {}
        self.second_moment: dict[str, np.ndarray] = {}
        self.frozen = False
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Node:
        if name in self._nodes:
            raise KeyError(f"duplicate parameter name {name!r}")
        node = parameter(value, name=name)
        node.requires_grad = not self.frozen
        self._nodes[name] = node
        self.first_moment[name] = np.zeros_like(node.value)
        self.second_moment[name] = np.zeros_like(node.value)
        return node

    def __getitem__(self, name: str) -> Node:
        return self._nodes[name]

    def __contains__(self, name: str) -> bool:
        return name in self._nodes

    def __iter__(self) -> Iterator[str]:
        return iter(self._nodes)

    def __len__(self) -> int:
        return len(self._nodes)

    def items(self) -> Iterable[tuple[str, Node]]:
        return self._nodes.items()

    def values(self) -> dict[str, np.ndarray]:
        return {name: node.value for name, node in self._nodes.items()}

    def freeze(self) -> None:
        self.frozen = True
        for node in self._nodes.values():
            node.requires_grad = False

    def unfreeze(self) -> None:
        self.frozen = False
        for node in self._nodes.values():
            node.requires_grad = True

    def zero_grad(self) -> None:
        for node in self._nodes.values():
            node.zero_grad()

    def assert_no_grad(self) -> None:
        for name, node in self._nodes.items():
            if np.any(node.grad != 0):
                raise FrozenParameterError(f"frozen parameter {name!r} received a gradient")

    def copy(self) -> ParamStore:
        """Deep copy of values; optimizer state is reset."""
        out = ParamStore({name: v.copy() for name, v in self.values().items()})
        if self.frozen:
            out.freeze()
        return out

    def astype(self, dtype) -> ParamStore:
        out = ParamStore({name: v.astype(dtype) for name, v in self.values().items()})
        if self.frozen:
            out.freeze()
        return out


def adam_step(params: ParamStore, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every parameter, then zero the grads."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    beta1, beta2 = betas
    params.step_count += 1
    t = params.step_count
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name, node in params.items():
        g = node.grad
        m = params.first_moment[name]
        v = params.second_moment[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        node.value = node.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    params.zero_grad()


__all__ = [
    "Node", "ParamStore", "ShapeError", "NonFiniteError", "FrozenParameterError",
    "parameter", "const", "as_node", "add", "sub", "mul", "scale", "matmul", "sigmoid",
    "tanh", "relu", "exp", "log", "sum", "mean", "concat", "take", "reshape", "transpose",
    "l2_normalize", "log_softmax", "softmax", "masked_logsumexp", "pairwise_sq_dists",
    "backward", "adam_step",
]
