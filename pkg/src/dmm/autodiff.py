"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every differentiable value is a :class:`Node`.  A node stores its forward
value, its parents and a closure that maps the upstream gradient onto one
gradient per parent.  The graph is rebuilt on every forward pass; parameter
leaves are long-lived nodes without parents, so nothing is ever accumulated
on the nodes themselves and :func:`gradient` is a pure function.

Broadcasting is deliberately narrow: two operands of an elementwise op must
have identical shapes, or one of them must equal the other's shape without
its leading (batch) axis, or be a 0-d scalar.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate a primitive's contract."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class Node:
    __slots__ = ("value", "parents", "backward", "op", "name", "__weakref__")

    def __init__(
        self,
        value,
        parents: tuple = (),
        backward: Callable | None = None,
        op: str = "leaf",
        name: str | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward = backward
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def const(value) -> Node:
    """Wrap an array as a graph constant (never receives a gradient)."""
    return Node(value, op="const")


def as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(value, parents, backward, op) -> Node:
    _check_finite(value, op)
    return Node(value, parents, backward, op)


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    return a == b or a == () or b == () or a == b[1:] or b == a[1:]


def _check_pair(a: Node, b: Node, op: str) -> None:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)


# ----------------------------------------------------------------------------
# binary primitives


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_pair(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_pair(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        "sub",
    )


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_pair(a, b, "mul")
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_pair(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
        "div",
    )


def matmul(a, b) -> Node:
    """Matrix product of a 2-d (or 1-d) left operand with a 2-d right operand."""
    a, b = as_node(a), as_node(b)
    if b.value.ndim != 2 or a.value.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        if av.ndim == 1:
            return g @ bv.T, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), backward, "matmul")


def scale(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


# ----------------------------------------------------------------------------
# unary primitives


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Node:
    a = as_node(a)
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _make(out, (a,), lambda g: (g / av,), "log")


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def sqrt(a) -> Node:
    a = as_node(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # both branches are evaluated; exp(-|v|) never overflows
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Node:
    a = as_node(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Node:
    a = as_node(a)
    pos = a.value > 0
    return _make(np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,), "relu")


def softplus_value(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def softplus(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make(softplus_value(av), (a,), lambda g: (g * _sigmoid(av),), "softplus")


def sin(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make(np.sin(av), (a,), lambda g: (g * np.cos(av),), "sin")


# ----------------------------------------------------------------------------
# reductions and shape ops


def sum(a, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy
    a = as_node(a)
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    ax = axis % len(shape)
    return _make(
        a.value.sum(axis=ax),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),),
        "sum",
    )


def mean(a, axis: int | None = None) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def concat(nodes: Sequence) -> Node:
    """Concatenate along the last axis; leading extents must agree."""
    nodes = [as_node(n) for n in nodes]
    lead = nodes[0].shape[:-1]
    for n in nodes[1:]:
        if n.shape[:-1] != lead:
            raise ShapeError(f"concat: incompatible shapes {nodes[0].shape} and {n.shape}")
    widths = [n.shape[-1] for n in nodes]
    cuts = np.cumsum(widths)[:-1]
    return _make(
        np.concatenate([n.value for n in nodes], axis=-1),
        tuple(nodes),
        lambda g: tuple(np.split(g, cuts, axis=-1)),
        "concat",
    )


def slice_last(a, start: int, stop: int) -> Node:
    a = as_node(a)
    shape = a.shape
    if not 0 <= start < stop <= shape[-1]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for shape {shape}")

    def backward(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return _make(a.value[..., start:stop], (a,), backward, "slice")


# ----------------------------------------------------------------------------
# reverse pass


def _topo_order(output: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(output, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def gradient(output: Node, leaves: Mapping[str, Node] | Iterable[Node]) -> dict[str, np.ndarray]:
    """Return d(output)/d(leaf) for every requested leaf.

    ``leaves`` is either a mapping ``id -> leaf node`` or an iterable of named
    leaves.  Leaves that the output does not depend on get a zero gradient.
    """
    if output.value.shape != () and output.value.size != 1:
        raise ShapeError(f"gradient: output must be scalar, got shape {output.shape}")
    if not isinstance(leaves, Mapping):
        leaves = {leaf.name: leaf for leaf in leaves}

    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    for node in reversed(_topo_order(output)):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or not node.parents:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if parent.op == "const":
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {
        name: np.array(grads.get(id(leaf), np.zeros(leaf.shape)), dtype=np.float64).reshape(leaf.shape)
        for name, leaf in leaves.items()
    }


# ----------------------------------------------------------------------------
# parameters and Adam

FORMAT_VERSION = 1


class FormatVersionError(ValueError):
    pass


class ParamStore:
    """Named parameter leaves plus Adam moments.

    The same leaf objects are reused across forward passes; updates replace
    ``leaf.value`` wholesale so values captured by an old graph stay intact.
    """

    def __init__(self):
        self.params: dict[str, Node] = {}
        self.trainable: dict[str, bool] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value, trainable: bool = True) -> Node:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        leaf = Node(np.array(value, dtype=np.float64), name=name)
        self.params[name] = leaf
        self.trainable[name] = trainable
        self.m[name] = np.zeros(leaf.shape)
        self.v[name] = np.zeros(leaf.shape)
        return leaf

    def __getitem__(self, name: str) -> Node:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def values(self) -> dict[str, np.ndarray]:
        return {k: leaf.value.copy() for k, leaf in self.params.items()}

    def set_values(self, values: Mapping[str, np.ndarray]) -> None:
        for k, v in values.items():
            v = np.array(v, dtype=np.float64)
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: expected shape {self.params[k].shape}, got {v.shape}")
            self.params[k].value = v

    def trainable_leaves(self) -> dict[str, Node]:
        return {k: leaf for k, leaf in self.params.items() if self.trainable[k]}

    def to_dict(self) -> dict:
        def pack(arrays):
            return {k: {"shape": list(a.shape), "data": a.ravel().tolist()} for k, a in arrays.items()}

        return {
            "format_version": FORMAT_VERSION,
            "params": pack({k: leaf.value for k, leaf in self.params.items()}),
            "trainable": dict(self.trainable),
            "adam": {"step": self.step, "m": pack(self.m), "v": pack(self.v)},
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ParamStore":
        if doc.get("format_version") != FORMAT_VERSION:
            raise FormatVersionError(
                f"unsupported parameter format_version {doc.get('format_version')!r}; expected {FORMAT_VERSION}"
            )

        def unpack(entry):
            return np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])

        store = cls()
        trainable = doc.get("trainable", {})
        for k, entry in doc["params"].items():
            store.add(k, unpack(entry), trainable.get(k, True))
        adam = doc.get("adam")
        if adam:
            store.step = int(adam["step"])
            for k in store.params:
                store.m[k] = unpack(adam["m"][k])
                store.v[k] = unpack(adam["v"][k])
        return store

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "ParamStore":
        return cls.from_dict(json.loads(text))


def adam_step(
    store: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float = 0.0008,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    ascend: bool = False,
) -> ParamStore:
    """One bias-corrected Adam update of the parameters named in ``grads``.

    The step counter advances once per call.  Parameters flagged as frozen
    are skipped even if a gradient is supplied.  With ``ascend`` the update
    climbs the objective instead of descending it.
    """
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    sign = 1.0 if ascend else -1.0
    for k, g in grads.items():
        leaf = store.params[k]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != leaf.shape:
            raise ShapeError(f"adam_step: gradient for {k} has shape {g.shape}, parameter {leaf.shape}")
        if not store.trainable[k]:
            continue
        m = beta1 * store.m[k] + (1.0 - beta1) * g
        v = beta2 * store.v[k] + (1.0 - beta2) * g * g
        store.m[k], store.v[k] = m, v
        leaf.value = leaf.value + sign * lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store
