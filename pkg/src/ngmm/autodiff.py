"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every elementary operation applied to a
:class:`Node` while it is active.  Operations on plain arrays (no node
involved) evaluate with exactly the same numpy expressions and are not
recorded, so taped and untaped evaluation agree bit-for-bit.

The vocabulary is deliberately small: arithmetic, ``exp``, ``log``,
``tanh``, ``sqrt``, ``erf``, ``softplus``, ``relu``, log-sum-exp,
``dot``/``affine`` and a handful of shape operations.  That is enough to
differentiate multilayer perceptrons and the quadrature / fixed-step ODE
objectives built on top of them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import special

__all__ = [
    "ACTIVATIONS",
    "MlpArch",
    "Node",
    "NumericError",
    "ParamVector",
    "ShapeError",
    "Tape",
    "active_tape",
    "grad",
    "norm",
    "segment_sum",
    "init_params",
    "mlp_apply",
]

ACTIVATIONS = ("relu", "tanh", "softplus")


class ShapeError(ValueError):
    """Raised when array dimensions do not match an architecture."""


class NumericError(ArithmeticError):
    """Raised when a recorded operation produces a non-finite value."""

    def __init__(self, message: str, node_label: str | None = None):
        super().__init__(message)
        self.node_label = node_label


_TAPES: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Node:
    """A value recorded on a tape, together with how it was produced."""

    __slots__ = ("value", "tape", "index", "label", "fn", "args", "vjps", "grad")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, tape, label, fn=None, args=(), vjps=()):
        self.value = value
        self.tape = tape
        self.label = label
        self.fn = fn
        self.args = args
        self.vjps = vjps
        self.grad = None
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    def __repr__(self):
        return f"Node({self.label}#{self.index}, shape={np.shape(self.value)})"

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __len__(self):
        return len(self.value)

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
        return dot(self, other)

    def __rmatmul__(self, other):
        return dot(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Single-owner recording of elementary operations.

    Use as a context manager; operations on nodes created inside the block
    are appended in evaluation order, which is a topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def variable(self, value, label: str = "input") -> Node:
        return Node(np.array(value, dtype=float), self, label)

    def backward(self, out: Node) -> None:
        """Accumulate d(out)/d(node) into ``node.grad`` for every node."""
        if np.size(out.value) != 1:
            raise ShapeError("backward() needs a scalar output")
        for node in self.nodes:
            node.grad = None
        out.grad = np.ones_like(out.value, dtype=float)
        for node in reversed(self.nodes[: out.index + 1]):
            if node.grad is None or node.fn is None:
                continue
            vals = [a.value if isinstance(a, Node) else a for a in node.args]
            for arg, vjp in zip(node.args, node.vjps):
                if not isinstance(arg, Node) or vjp is None:
                    continue
                g = _unbroadcast(vjp(node.grad, node.value, *vals), np.shape(arg.value))
                arg.grad = g if arg.grad is None else arg.grad + g

    def replay(self) -> list:
        """Re-evaluate every recorded operation from the current leaf values."""
        out = {}
        for node in self.nodes:
            if node.fn is None:
                out[node.index] = node.value
                continue
            vals = [out[a.index] if isinstance(a, Node) else a for a in node.args]
            out[node.index] = node.fn(*vals)
        return [out[n.index] for n in self.nodes]


def _unbroadcast(g, shape):
    g = np.asarray(g, dtype=float)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _op(label: str, fn: Callable, args: tuple, vjps: tuple):
    tape = None
    for a in args:
        if isinstance(a, Node):
            tape = a.tape
            break
    vals = [a.value if isinstance(a, Node) else a for a in args]
    out = fn(*vals)
    if tape is None:
        return out
    if not np.all(np.isfinite(out)):
        raise NumericError(
            f"non-finite value produced by '{label}' (node {len(tape.nodes)})",
            node_label=label,
        )
    return Node(out, tape, label, fn, args, vjps)


def value_of(x):
    return x.value if isinstance(x, Node) else x


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    return _op("add", np.add, (a, b), (lambda g, o, a, b: g, lambda g, o, a, b: g))


def sub(a, b):
    return _op("sub", np.subtract, (a, b), (lambda g, o, a, b: g, lambda g, o, a, b: -g))


def mul(a, b):
    return _op(
        "mul", np.multiply, (a, b),
        (lambda g, o, a, b: g * b, lambda g, o, a, b: g * a),
    )


def div(a, b):
    return _op(
        "div", np.divide, (a, b),
        (lambda g, o, a, b: g / b, lambda g, o, a, b: -g * o / b),
    )


def neg(a):
    return _op("neg", np.negative, (a,), (lambda g, o, a: -g,))


def exp(a):
    return _op("exp", np.exp, (a,), (lambda g, o, a: g * o,))


def log(a):
    return _op("log", np.log, (a,), (lambda g, o, a: g / a,))


def tanh(a):
    return _op("tanh", np.tanh, (a,), (lambda g, o, a: g * (1.0 - o * o),))


def sqrt(a):
    return _op("sqrt", np.sqrt, (a,), (lambda g, o, a: g * 0.5 / o,))


_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def erf(a):
    return _op(
        "erf", special.erf, (a,),
        (lambda g, o, a: g * _TWO_OVER_SQRT_PI * np.exp(-a * a),),
    )


def _softplus(a):
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))


def softplus(a):
    """log(1 + e^a) without overflow."""
    return _op("softplus", _softplus, (a,), (lambda g, o, a: g * special.expit(a),))


def _relu(a):
    return np.maximum(a, 0.0)


def relu(a):
    # subgradient at the kink is 0
    return _op("relu", _relu, (a,), (lambda g, o, a: g * (a > 0.0),))


def clip(a, lo, hi):
    return _op(
        "clip", lambda a: np.clip(a, lo, hi), (a,),
        (lambda g, o, a: g * ((a >= lo) & (a <= hi)),),
    )


def square(a):
    return _op("square", np.square, (a,), (lambda g, o, a: 2.0 * g * a,))


# ------------------------------------------------------------- reductions


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    def vjp(g, o, a):
        if axis is None:
            return np.broadcast_to(g, np.shape(a))
        return np.broadcast_to(np.expand_dims(g, axis), np.shape(a))

    return _op("sum", lambda a: np.sum(a, axis=axis), (a,), (vjp,))


def _lse(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(a - m), axis=axis, keepdims=True)
    return np.squeeze(m + np.log(s), axis=axis)


def logsumexp(a, axis=-1):
    """Overflow-safe log(sum(exp(a))) along one axis."""

    def vjp(g, o, a):
        return np.expand_dims(g, axis) * np.exp(a - np.expand_dims(o, axis))

    return _op("logsumexp", lambda a: _lse(a, axis), (a,), (vjp,))


def logaddexp(a, b):
    return _op(
        "logaddexp", np.logaddexp, (a, b),
        (lambda g, o, a, b: g * np.exp(a - o), lambda g, o, a, b: g * np.exp(b - o)),
    )


def segment_sum(a, counts):
    """Sum consecutive row blocks of sizes ``counts`` (in order) along axis 0."""
    counts = np.asarray(counts, dtype=int)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    def fwd(a):
        return np.add.reduceat(a, starts, axis=0)

    return _op("segment_sum", fwd, (a,), (lambda g, o, a: np.repeat(g, counts, axis=0),))


def norm(a, axis=-1):
    """Euclidean norm along ``axis``; the gradient at a zero vector is 0."""

    def vjp(g, o, a):
        safe = np.where(o > 0.0, o, 1.0)
        return np.expand_dims(np.where(o > 0.0, g / safe, 0.0), axis) * a

    return _op("norm", lambda a: np.sqrt(np.sum(a * a, axis=axis)), (a,), (vjp,))


# ---------------------------------------------------------- linear algebra


def dot(a, b):
    """Matrix product with numpy ``@`` semantics for 1-D and 2-D operands."""

    def vjp_a(g, o, a, b):
        if np.ndim(b) == 1:
            return np.multiply.outer(g, b) if np.ndim(a) == 2 else g * b
        if np.ndim(a) == 1:
            return b @ g
        return g @ b.T

    def vjp_b(g, o, a, b):
        if np.ndim(a) == 1:
            return np.multiply.outer(a, g) if np.ndim(b) == 2 else g * a
        if np.ndim(b) == 1:
            return a.T @ g
        return a.T @ g

    return _op("dot", np.matmul, (a, b), (vjp_a, vjp_b))


def affine(x, w, b):
    """``x @ w + b`` as a single recorded node."""

    def vjp_x(g, o, x, w, b):
        return g @ w.T

    def vjp_w(g, o, x, w, b):
        return np.multiply.outer(x, g) if np.ndim(x) == 1 else x.T @ g

    def vjp_b(g, o, x, w, b):
        return g if np.ndim(g) == 1 else g.sum(axis=0)

    return _op("affine", lambda x, w, b: x @ w + b, (x, w, b), (vjp_x, vjp_w, vjp_b))


# ---------------------------------------------------------- shape helpers


def _basic_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis or k is None for k in keys)


def getitem(a, key):
    basic = _basic_index(key)

    def vjp(g, o, a):
        out = np.zeros(np.shape(a))
        if basic:
            out[key] += g
        else:
            np.add.at(out, key, g)
        return out

    return _op("getitem", lambda a: a[key], (a,), (vjp,))


def take(a, indices, axis=0):
    indices = np.asarray(indices)

    def vjp(g, o, a):
        out = np.zeros(np.shape(a))
        idx = [slice(None)] * np.ndim(a)
        idx[axis] = indices
        np.add.at(out, tuple(idx), g)
        return out

    return _op("take", lambda a: np.take(a, indices, axis=axis), (a,), (vjp,))


def reshape(a, shape):
    return _op(
        "reshape", lambda a: np.reshape(a, shape), (a,),
        (lambda g, o, a: np.reshape(g, np.shape(a)),),
    )


def stack(items: Sequence, axis=0):
    items = tuple(items)

    def make_vjp(i):
        return lambda g, o, *vals: np.take(g, i, axis=axis)

    return _op(
        "stack", lambda *vals: np.stack(vals, axis=axis), items,
        tuple(make_vjp(i) for i in range(len(items))),
    )


def concat(items: Sequence, axis=0):
    items = tuple(items)
    sizes = [np.shape(value_of(a))[axis] for a in items]
    bounds = np.concatenate([[0], np.cumsum(sizes)])

    def make_vjp(i):
        return lambda g, o, *vals: np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)

    return _op(
        "concat", lambda *vals: np.concatenate(vals, axis=axis), items,
        tuple(make_vjp(i) for i in range(len(items))),
    )


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    return _op(
        "where", lambda a, b: np.where(cond, a, b), (a, b),
        (lambda g, o, a, b: np.where(cond, g, 0.0), lambda g, o, a, b: np.where(cond, 0.0, g)),
    )


# ------------------------------------------------------------- networks


@dataclass(frozen=True)
class MlpArch:
    """Fully connected network shape; ``hidden=()`` is a single linear layer."""

    input_dim: int
    hidden: tuple[int, ...] = ()
    output_dim: int = 1
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ShapeError(f"layer widths must be positive: {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        w = self.widths
        return [(w[i], w[i + 1]) for i in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return int(np.sum([a * b + b for a, b in self.layer_shapes]))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MlpArch":
        return cls(int(d["input_dim"]), tuple(d.get("hidden", ())),
                   int(d.get("output_dim", 1)), d.get("activation", "relu"))


def _activate(h, name):
    if name == "relu":
        return relu(h)
    if name == "tanh":
        return tanh(h)
    return softplus(h)


def mlp_apply(arch: MlpArch, params, x):
    """Evaluate the network on one input vector or on a batch of rows.

    ``params`` is the flat slice for this architecture (array or node).
    Hidden layers use ``arch.activation``; the output layer is linear.
    """
    if np.shape(params) != (arch.n_params,):
        raise ShapeError(f"expected {arch.n_params} parameters, got shape {np.shape(params)}")
    if np.shape(x)[-1:] != (arch.input_dim,) or np.ndim(x) not in (1, 2):
        raise ShapeError(f"expected input with last dimension {arch.input_dim}, got {np.shape(x)}")
    h = x
    off = 0
    shapes = arch.layer_shapes
    for i, (fan_in, fan_out) in enumerate(shapes):
        w = reshape(params[off: off + fan_in * fan_out], (fan_in, fan_out))
        off += fan_in * fan_out
        b = params[off: off + fan_out]
        off += fan_out
        h = affine(h, w, b)
        if i < len(shapes) - 1:
            h = _activate(h, arch.activation)
    return h


@dataclass(frozen=True)
class ParamVector:
    """Flat parameters for one or more named networks, in layout order."""

    values: np.ndarray
    layout: tuple[tuple[str, MlpArch], ...] = field(default=())

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "layout", tuple((str(n), a) for n, a in self.layout))
        expected = int(np.sum([a.n_params for _, a in self.layout]))
        if self.layout and vals.size != expected:
            raise ShapeError(f"layout needs {expected} values, got {vals.size}")

    def __len__(self):
        return self.values.size

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.layout)

    def arch(self, name: str) -> MlpArch:
        return dict(self.layout)[name]

    def offsets(self) -> dict[str, slice]:
        out, off = {}, 0
        for name, arch in self.layout:
            out[name] = slice(off, off + arch.n_params)
            off += arch.n_params
        return out

    def unflatten(self) -> dict[str, list[tuple[np.ndarray, np.ndarray]]]:
        layers = {}
        for name, arch in self.layout:
            flat = self.values[self.offsets()[name]]
            off, out = 0, []
            for fan_in, fan_out in arch.layer_shapes:
                w = flat[off: off + fan_in * fan_out].reshape(fan_in, fan_out)
                off += fan_in * fan_out
                out.append((w.copy(), flat[off: off + fan_out].copy()))
                off += fan_out
            layers[name] = out
        return layers

    @classmethod
    def flatten(cls, layout, layers: Mapping[str, Iterable]) -> "ParamVector":
        parts = []
        for name, _ in layout:
            for w, b in layers[name]:
                parts.append(np.asarray(w, dtype=float).reshape(-1))
                parts.append(np.asarray(b, dtype=float).reshape(-1))
        return cls(np.concatenate(parts) if parts else np.zeros(0), tuple(layout))

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def to_json(self) -> dict:
        return {
            "arch": {name: arch.to_dict() for name, arch in self.layout},
            "values": [float(v) for v in self.values],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "ParamVector":
        layout = tuple((name, MlpArch.from_dict(d)) for name, d in doc["arch"].items())
        return cls(np.asarray(doc["values"], dtype=float), layout)

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def init_params(arch, seed: int) -> ParamVector:
    """Uniform Glorot initialisation with zero biases.

    ``arch`` is a single :class:`MlpArch` or a sequence of ``(name, arch)``
    pairs; networks are drawn in layout order from one seeded stream.
    """
    layout = (("net", arch),) if isinstance(arch, MlpArch) else tuple(arch)
    rng = np.random.Generator(np.random.PCG64(seed))
    parts = []
    for _, a in layout:
        for fan_in, fan_out in a.layer_shapes:
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            parts.append(np.zeros(fan_out))
    return ParamVector(np.concatenate(parts), layout)


def grad(objective: Callable, at) -> tuple[float, np.ndarray]:
    """Value and gradient of a scalar objective of a flat parameter vector."""
    values = at.values if isinstance(at, ParamVector) else np.asarray(at, dtype=float)
    with Tape() as tape:
        p = tape.variable(values, label="params")
        out = objective(p)
        if not isinstance(out, Node):
            return float(np.asarray(out).reshape(())), np.zeros(values.shape)
        tape.backward(out)
    g = p.grad if p.grad is not None else np.zeros(values.shape)
    return float(np.asarray(out.value).reshape(())), np.array(g, dtype=float)
