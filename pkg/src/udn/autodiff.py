"""A small define-by-run reverse-mode differentiation engine.

Nodes wrap float64 numpy arrays.  Every operation appends its output node to
the :class:`Graph` that owns its inputs, so creation order is a valid
topological order and :meth:`Graph.backward` is a single reverse sweep.
Parameters live in a :class:`ParamStore`; leaves created with
:meth:`Graph.param` push their gradients back into the store.

Example::

    store = ParamStore()
    store.add("w", np.array(3.0))
    g = Graph()
    w = g.param(store, "w")
    g.backward(w * w)
    store.grad("w")  # array(6.)
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ConfigError(ValueError):
    """Invalid optimizer or model configuration."""


def lgamma(x: float) -> float:
    """Log-gamma of a scalar.  Not differentiated by the engine."""
    return math.lgamma(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """A value on a :class:`Graph` together with its accumulated adjoint."""

    __slots__ = ("data", "grad", "graph", "parents", "backward_fn", "op", "index", "needs_grad")

    def __init__(self, graph, data, parents=(), backward_fn=None, op="leaf", needs_grad=None):
        self.graph = graph
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in parents)
        self.needs_grad = needs_grad
        self.index = len(graph.nodes)
        graph.nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.data.shape})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


class Graph:
    """Append-only tape of nodes for one forward/backward pass.

    ``stats`` is a free-form counter that model code may use to tally the
    work done while building the graph (e.g. hidden-layer evaluations).
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.stats: Counter = Counter()
        self._params: list[tuple[Node, ParamStore, str]] = []
        self._bound: dict[tuple[int, str], Node] = {}

    def constant(self, value) -> Node:
        return Node(self, np.asarray(value, dtype=np.float64))

    def param(self, store: "ParamStore", name: str) -> Node:
        """Leaf bound to ``store[name]``; repeated calls return the same node."""
        key = (id(store), name)
        node = self._bound.get(key)
        if node is None:
            node = Node(self, store[name], op=f"param:{name}", needs_grad=True)
            self._bound[key] = node
            self._params.append((node, store, name))
        return node

    def lift(self, value) -> Node:
        if isinstance(value, Node):
            if value.graph is not self:
                raise ContractError("operands belong to different graphs")
            return value
        return self.constant(value)

    def backward(self, root: Node) -> None:
        """Accumulate d(root)/d(param) into every bound ParamStore slot."""
        if root.graph is not self:
            raise ContractError("root does not belong to this graph")
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.data.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes[: root.index + 1]):
            if node.grad is None or node.backward_fn is None or not node.needs_grad:
                continue
            node.backward_fn(node.grad)
        for node, store, name in self._params:
            if node.grad is not None:
                store.slots[name].grad += node.grad


def _emit(graph: Graph, data, parents, backward_fn, op) -> Node:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return Node(graph, data, parents, backward_fn, op)


def _accumulate(node: Node, grad: np.ndarray) -> None:
    # adjoints are never mutated in place, so sharing arrays is safe
    if not node.needs_grad:
        return
    if node.grad is None:
        node.grad = grad
    else:
        node.grad = node.grad + grad


def _graph_of(*operands) -> Graph:
    for x in operands:
        if isinstance(x, Node):
            return x.graph
    raise ContractError("at least one operand must be a Node")


def add(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = g.lift(a), g.lift(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.data.shape))
        _accumulate(b, _unbroadcast(grad, b.data.shape))

    return _emit(g, out, (a, b), backward, "add")


def sub(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = g.lift(a), g.lift(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.data.shape))
        _accumulate(b, _unbroadcast(-grad, b.data.shape))

    return _emit(g, out, (a, b), backward, "sub")


def mul(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = g.lift(a), g.lift(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(grad):
        _accumulate(a, _unbroadcast(grad * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(grad * a.data, b.data.shape))

    return _emit(g, out, (a, b), backward, "mul")


def div(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = g.lift(a), g.lift(b)
    try:
        out = a.data / b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(grad):
        _accumulate(a, _unbroadcast(grad / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-grad * a.data / b.data**2, b.data.shape))

    return _emit(g, out, (a, b), backward, "div")


def matmul(a: Node, b: Node) -> Node:
    g = _graph_of(a, b)
    a, b = g.lift(a), g.lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"cannot matmul {a.data.shape} by {b.data.shape}")
    out = a.data @ b.data

    def backward(grad):
        _accumulate(a, grad @ b.data.T)
        _accumulate(b, a.data.T @ grad)

    return _emit(g, out, (a, b), backward, "matmul")


def relu(a: Node) -> Node:
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def backward(grad):
        _accumulate(a, grad * mask)

    return _emit(a.graph, out, (a,), backward, "relu")


def exp(a: Node) -> Node:
    out = np.exp(a.data)

    def backward(grad):
        _accumulate(a, grad * out)

    return _emit(a.graph, out, (a,), backward, "exp")


def log(a: Node) -> Node:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    out = np.log(a.data)

    def backward(grad):
        _accumulate(a, grad / a.data)

    return _emit(a.graph, out, (a,), backward, "log")


def square(a: Node) -> Node:
    def backward(grad):
        _accumulate(a, 2.0 * grad * a.data)

    return _emit(a.graph, a.data * a.data, (a,), backward, "square")


def sum(a: Node, axis=None) -> Node:  # noqa: A001 - mirrors numpy naming
    out = a.data.sum(axis=axis)

    def backward(grad):
        if axis is None:
            _accumulate(a, np.broadcast_to(grad, a.data.shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(grad, axis), a.data.shape))

    return _emit(a.graph, out, (a,), backward, "sum")


def log_softmax(a: Node, axis: int = -1) -> Node:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(grad):
        _accumulate(a, grad - probs * grad.sum(axis=axis, keepdims=True))

    return _emit(a.graph, out, (a,), backward, "log_softmax")


def take(a: Node, idx) -> Node:
    """Basic or fancy indexing; the adjoint scatters back with ``np.add.at``."""
    out = a.data[idx]

    def backward(grad):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, grad)
        _accumulate(a, full)

    return _emit(a.graph, out, (a,), backward, "take")


def stack(nodes) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise ContractError("cannot stack an empty sequence")
    g = _graph_of(*nodes)
    nodes = [g.lift(n) for n in nodes]
    out = np.stack([n.data for n in nodes])

    def backward(grad):
        for i, n in enumerate(nodes):
            _accumulate(n, grad[i])

    return _emit(g, out, tuple(nodes), backward, "stack")


def sum_squares(nodes) -> Node:
    """``sum_i ||nodes[i]||^2`` as one node."""
    nodes = list(nodes)
    g = _graph_of(*nodes)
    out = np.sum([np.vdot(n.data, n.data) for n in nodes])

    def backward(grad):
        for n in nodes:
            _accumulate(n, 2.0 * grad * n.data)

    return _emit(g, out, tuple(nodes), backward, "sum_squares")


def cumsum(a: Node) -> Node:
    """Cumulative sum of a vector."""
    out = np.cumsum(a.data)

    def backward(grad):
        _accumulate(a, np.cumsum(grad[::-1])[::-1])

    return _emit(a.graph, out, (a,), backward, "cumsum")


# --------------------------------------------------------------------------
# Layers and likelihoods


def forward_dense(x: Node, weight: Node, bias: Node, activation: str = "relu") -> Node:
    """``activation(x @ weight + bias)`` as a single graph node."""
    g = _graph_of(x, weight, bias)
    x, weight, bias = g.lift(x), g.lift(weight), g.lift(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise DimensionError(
            f"input of shape {x.data.shape} does not match weight {weight.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[1],):
        raise DimensionError(f"bias {bias.data.shape} does not match weight {weight.data.shape}")
    z = x.data @ weight.data + bias.data
    if activation == "relu":
        mask = z > 0
        out = np.where(mask, z, 0.0)
    elif activation == "identity":
        mask = None
        out = z
    else:
        raise ConfigError(f"unknown activation {activation!r}")

    def backward(grad):
        gz = grad if mask is None else grad * mask
        if x.needs_grad:
            _accumulate(x, gz @ weight.data.T)
        _accumulate(weight, x.data.T @ gz)
        _accumulate(bias, gz.sum(axis=0))

    return _emit(g, out, (x, weight, bias), backward, "dense")


def categorical_loglik(logits: Node, labels) -> Node:
    """Sum over rows of ``log softmax(logits)[label]``, stabilised by the row max."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels must lie in [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)

    def backward(grad):
        d = -np.exp(logp)
        d[rows, labels] += 1.0
        _accumulate(logits, grad * d)

    return _emit(logits.graph, logp[rows, labels].sum(), (logits,), backward, "categorical_loglik")


def gaussian_loglik(mean: Node, targets, sigma: float = 1.0) -> Node:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    targets = np.asarray(targets, dtype=np.float64)
    if mean.data.shape != targets.shape:
        raise DimensionError(f"mean {mean.data.shape} vs targets {targets.shape}")
    const = -0.5 * math.log(2 * math.pi * sigma**2) * targets.size
    return sum(square(mean - targets)) * (-0.5 / sigma**2) + const


# --------------------------------------------------------------------------
# Parameters and optimizers


@dataclass
class Slot:
    value: np.ndarray
    grad: np.ndarray
    state: dict = field(default_factory=dict)


class ParamStore:
    """Named float64 parameters with gradient accumulators and optimizer slots."""

    def __init__(self):
        self.slots: dict[str, Slot] = {}

    def add(self, name: str, value) -> None:
        if name in self.slots:
            raise ContractError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=np.float64, copy=True)
        self.slots[name] = Slot(value, np.zeros_like(value))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.slots[name].value

    def __setitem__(self, name: str, value) -> None:
        slot = self.slots[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != slot.value.shape:
            raise DimensionError(f"{name}: shape {value.shape} != {slot.value.shape}")
        slot.value[...] = value

    def __contains__(self, name: str) -> bool:
        return name in self.slots

    def __iter__(self):
        return iter(self.slots)

    def __len__(self):
        return len(self.slots)

    def grad(self, name: str) -> np.ndarray:
        return self.slots[name].grad

    def zero_grad(self) -> None:
        for slot in self.slots.values():
            slot.grad[...] = 0.0

    def values(self) -> dict[str, np.ndarray]:
        return {k: s.value.copy() for k, s in self.slots.items()}


ADAM_DEFAULTS = {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.0}
SGD_DEFAULTS = {"momentum": 0.0, "weight_decay": 0.0}


def step(store: ParamStore, optimizer: str, lr: float, names=None, **hyper) -> None:
    """Apply one descent step to ``names`` (default: every slot).

    ``optimizer`` is ``"adam"`` or ``"sgd_momentum"``.  Conventions follow the
    usual deep-learning libraries: weight decay is added to the gradient,
    momentum buffers start at the first gradient, Adam is bias corrected.
    Each slot keeps its own step count, so slots created late start fresh.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if optimizer == "adam":
        unknown = set(hyper) - set(ADAM_DEFAULTS)
        h = {**ADAM_DEFAULTS, **hyper}
    elif optimizer == "sgd_momentum":
        unknown = set(hyper) - set(SGD_DEFAULTS)
        h = {**SGD_DEFAULTS, **hyper}
    else:
        raise ConfigError(f"unknown optimizer {optimizer!r}")
    if unknown:
        raise ConfigError(f"unknown {optimizer} settings: {sorted(unknown)}")

    for name in store.slots if names is None else names:
        slot = store.slots[name]
        g = slot.grad
        if h["weight_decay"]:
            g = g + h["weight_decay"] * slot.value
        st = slot.state
        if optimizer == "adam":
            t = st.get("t", 0) + 1
            m = h["beta1"] * st.get("m", 0.0) + (1 - h["beta1"]) * g
            v = h["beta2"] * st.get("v", 0.0) + (1 - h["beta2"]) * g * g
            st.update(t=t, m=m, v=v)
            m_hat = m / (1 - h["beta1"] ** t)
            v_hat = v / (1 - h["beta2"] ** t)
            slot.value -= lr * m_hat / (np.sqrt(v_hat) + h["eps"])
        else:
            if h["momentum"]:
                buf = st.get("velocity")
                buf = g.copy() if buf is None else h["momentum"] * buf + g
                st["velocity"] = buf
                g = buf
            slot.value -= lr * g
