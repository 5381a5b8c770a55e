"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation on :class:`Node` objects evaluates eagerly.  While a
:class:`Tape` is active, operations that depend on a differentiable leaf are
recorded in creation order (which is a topological order), and
:meth:`Tape.backward` walks that list in reverse.  Outside a tape nothing is
recorded, which makes evaluation-only passes cheap.

A tape is owned by one thread; the active tape is tracked per thread.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node", "Tape", "ShapeError", "constant", "make_node", "forward", "backward", "value_and_grad",
    "add", "subtract", "multiply", "divide", "negate", "power", "matmul",
    "exp", "log", "log1p", "tanh", "relu", "softplus", "sigmoid", "square",
    "maximum", "where", "sum", "mean", "logsumexp", "conv1d", "avg_pool1d", "concat", "stack",
    "reshape", "transpose", "broadcast_to", "stop_gradient", "scale_grad",
]

_local = threading.local()


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible operand shapes."""


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "op", "parents", "vjp", "grad", "requires_grad", "tape", "name")
    # make ndarray <op> Node defer to the Node's reflected operator
    __array_ufunc__ = None

    def __init__(self, value, op="const", parents=(), vjp=None, requires_grad=False):
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = None
        self.name = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Node":
        return transpose(self)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return subtract(self, other)
    def __rsub__(self, other): return subtract(other, self)
    def __mul__(self, other): return multiply(self, other)
    def __rmul__(self, other): return multiply(other, self)
    def __truediv__(self, other): return divide(self, other)
    def __rtruediv__(self, other): return divide(other, self)
    def __neg__(self): return negate(self)
    def __pow__(self, other): return power(self, other)
    def __rpow__(self, other): return power(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return _getitem(self, index)

    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


class Tape:
    """Records differentiable nodes and owns the named parameter leaves."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self._previous = None

    def __enter__(self) -> "Tape":
        self._previous = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._previous
        self._previous = None

    def param(self, name: str, value) -> Node:
        """Register a named differentiable leaf."""
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered on this tape")
        node = self.leaf(value)
        node.name = name
        self.params[name] = node
        return node

    def leaf(self, value) -> Node:
        """Create an anonymous differentiable leaf."""
        node = Node(np.array(value, dtype=np.float64), "leaf", requires_grad=True)
        node.tape = self
        self.nodes.append(node)
        return node

    def record(self, node: Node) -> Node:
        node.tape = self
        self.nodes.append(node)
        return node

    def backward(self, root: Node) -> dict[str, np.ndarray]:
        """Accumulate d(root)/d(node) into every recorded node's ``grad``.

        Returns the gradients of the named parameters.  Accumulators are reset
        first, so calling this twice yields identical results.
        """
        if root.value.size != 1:
            raise ValueError(f"backward requires a scalar root, got shape {root.value.shape}")
        for node in self.nodes:
            node.grad = None
        if root.requires_grad:
            if root.tape is not self:
                raise ValueError("root was not recorded on this tape")
            root.grad = np.ones_like(root.value)
            for node in reversed(self.nodes):
                g = node.grad
                if g is None or node.vjp is None:
                    continue
                for parent, pg in zip(node.parents, node.vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    # never accumulate in place: vjps may hand the same array to several parents
                    parent.grad = pg if parent.grad is None else parent.grad + pg
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.value))
            for name, p in self.params.items()
        }


def constant(value) -> Node:
    """Wrap a value as a non-differentiable node."""
    if isinstance(value, Node):
        return value
    return Node(np.asarray(value, dtype=np.float64))


_as_node = constant


def make_node(value, op: str, parents: tuple, vjp) -> Node:
    """Create the output node of a primitive.

    ``vjp(g)`` must return one cotangent (or ``None``) per parent.  The node is
    recorded only when a tape is active and some parent requires a gradient.
    """
    tape = _active_tape()
    if tape is None:
        return Node(value, op)
    for p in parents:
        if p.requires_grad:
            return tape.record(Node(value, op, parents, vjp, True))
    return Node(value, op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op: str, fn, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return fn(a, b)
    except ValueError as err:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from err


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    out = _binary("add", np.add, a.value, b.value)

    def vjp(g):
        return (_unbroadcast(g, a.value.shape) if a.requires_grad else None,
                _unbroadcast(g, b.value.shape) if b.requires_grad else None)
    return make_node(out, "add", (a, b), vjp)


def subtract(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    out = _binary("subtract", np.subtract, a.value, b.value)

    def vjp(g):
        return (_unbroadcast(g, a.value.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.value.shape) if b.requires_grad else None)
    return make_node(out, "subtract", (a, b), vjp)


def multiply(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    out = _binary("multiply", np.multiply, a.value, b.value)

    def vjp(g):
        return (_unbroadcast(g * b.value, a.value.shape) if a.requires_grad else None,
                _unbroadcast(g * a.value, b.value.shape) if b.requires_grad else None)
    return make_node(out, "multiply", (a, b), vjp)


def divide(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    out = _binary("divide", np.divide, a.value, b.value)

    def vjp(g):
        ga = g / b.value
        return (_unbroadcast(ga, a.value.shape) if a.requires_grad else None,
                _unbroadcast(-ga * out, b.value.shape) if b.requires_grad else None)
    return make_node(out, "divide", (a, b), vjp)


def negate(a) -> Node:
    a = _as_node(a)
    return make_node(-a.value, "negate", (a,), lambda g: (-g,))


def power(a, b) -> Node:
    """Elementwise ``a ** b``; ``b`` may itself be differentiable."""
    a, b = _as_node(a), _as_node(b)
    out = _binary("power", np.power, a.value, b.value)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            av, bv = a.value, b.value
            ga = _unbroadcast(g * bv * np.power(av, bv - 1.0), av.shape)
        if b.requires_grad:
            av = a.value
            safe = np.where(av > 0, av, 1.0)
            gb = _unbroadcast(g * np.where(av > 0, out * np.log(safe), 0.0), b.value.shape)
        return ga, gb
    return make_node(out, "power", (a, b), vjp)


def square(a) -> Node:
    a = _as_node(a)
    av = a.value
    return make_node(av * av, "square", (a,), lambda g: (2.0 * g * av,))


def maximum(a, floor: float) -> Node:
    """Elementwise ``max(a, floor)`` against a constant floor."""
    a = _as_node(a)
    mask = a.value > floor
    return make_node(np.where(mask, a.value, floor), "maximum", (a,), lambda g: (g * mask,))


def where(cond, a, b) -> Node:
    """Elementwise selection with a constant boolean mask.

    The unselected branch receives an exactly zero cotangent.  This keeps a
    non-finite constant out of the gradient, but not a non-finite value whose
    own derivative is non-finite (0 * inf is NaN upstream).
    """
    a, b = _as_node(a), _as_node(b)
    cond = np.asarray(cond, dtype=bool)
    try:
        out = np.where(cond, a.value, b.value)
    except ValueError as err:
        raise ShapeError(f"where: incompatible shapes {cond.shape}, {a.value.shape} and {b.value.shape}") from err

    def vjp(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.value.shape) if a.requires_grad else None,
                _unbroadcast(np.where(cond, 0.0, g), b.value.shape) if b.requires_grad else None)
    return make_node(out, "where", (a, b), vjp)


# ---------------------------------------------------------------------------
# nonlinearities


def exp(a) -> Node:
    a = _as_node(a)
    out = np.exp(a.value)
    return make_node(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = _as_node(a)
    av = a.value
    return make_node(np.log(av), "log", (a,), lambda g: (g / av,))


def log1p(a) -> Node:
    a = _as_node(a)
    av = a.value
    return make_node(np.log1p(av), "log1p", (a,), lambda g: (g / (1.0 + av),))


def tanh(a) -> Node:
    a = _as_node(a)
    out = np.tanh(a.value)
    return make_node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Node:
    a = _as_node(a)
    mask = a.value > 0
    return make_node(a.value * mask, "relu", (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def softplus(a) -> Node:
    a = _as_node(a)
    av = a.value
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    return make_node(out, "softplus", (a,), lambda g: (g * _sigmoid(av),))


def sigmoid(a) -> Node:
    a = _as_node(a)
    out = _sigmoid(a.value)
    # 1 - sigmoid(x) == sigmoid(-x), without cancellation at saturation
    return make_node(out, "sigmoid", (a,), lambda g: (g * out * _sigmoid(-a.value),))


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False) -> Node:  # noqa: A001
    a = _as_node(a)
    shape = a.value.shape
    axes = _norm_axes(axis, a.value.ndim)
    out = np.sum(a.value, axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)
    return make_node(np.asarray(out), "sum", (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Node:
    a = _as_node(a)
    axes = _norm_axes(axis, a.value.ndim)
    count = int(np.prod([a.value.shape[ax] for ax in axes]))
    return sum(a, axes, keepdims) * (1.0 / count)


def logsumexp(a, axis=-1, keepdims=False) -> Node:
    """Max-shifted log-sum-exp along ``axis``."""
    a = _as_node(a)
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(av - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out_k = m + np.log(s)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * (e / s),)
    return make_node(np.asarray(out), "logsumexp", (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and shapes


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    try:
        out = av @ bv
    except ValueError as err:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}") from err

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            if bv.ndim == 1:
                ga = np.multiply.outer(g, bv) if av.ndim == 2 else g * bv
            else:
                ga = g @ bv.T if av.ndim == 2 else bv @ g
        if b.requires_grad:
            if av.ndim == 1:
                gb = np.multiply.outer(av, g) if bv.ndim == 2 else g * av
            elif bv.ndim == 1:
                gb = av.T @ g
            else:
                gb = av.T @ g
        return ga, gb
    return make_node(out, "matmul", (a, b), vjp)


def reshape(a, shape) -> Node:
    a = _as_node(a)
    old = a.value.shape
    return make_node(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Node:
    a = _as_node(a)
    out = np.transpose(a.value, axes)
    inverse = None if axes is None else np.argsort(axes)
    return make_node(out, "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(a, shape) -> Node:
    a = _as_node(a)
    old = a.value.shape
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError as err:
        raise ShapeError(f"broadcast: cannot broadcast {old} to {tuple(shape)}") from err
    return make_node(out, "broadcast", (a,), lambda g: (_unbroadcast(g, old),))


def _is_basic_index(index) -> bool:
    if not isinstance(index, tuple):
        index = (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in index)


def _getitem(a: Node, index) -> Node:
    av = a.value
    try:
        out = av[index]
    except IndexError as err:
        raise ShapeError(f"slice: index {index!r} invalid for shape {av.shape}") from err
    basic = _is_basic_index(index)

    def vjp(g):
        full = np.zeros_like(av)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)
    return make_node(out, "slice", (a,), vjp)


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = tuple(_as_node(n) for n in nodes)
    values = [n.value for n in nodes]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as err:
        shapes = ", ".join(str(v.shape) for v in values)
        raise ShapeError(f"concat: incompatible shapes along axis {axis}: {shapes}") from err
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))
    return make_node(out, "concat", nodes, vjp)


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = tuple(_as_node(n) for n in nodes)
    values = [n.value for n in nodes]
    try:
        out = np.stack(values, axis=axis)
    except ValueError as err:
        shapes = ", ".join(str(v.shape) for v in values)
        raise ShapeError(f"stack: shapes differ: {shapes}") from err

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))
    return make_node(out, "stack", nodes, vjp)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv1d(x, w, stride: int = 1) -> Node:
    """Valid 1-D convolution (cross-correlation).

    ``x`` has shape (batch, in_channels, T) and ``w`` has shape
    (out_channels, in_channels, width); the result has shape
    (batch, out_channels, (T - width) // stride + 1).
    """
    x, w = _as_node(x), _as_node(w)
    xv, wv = x.value, w.value
    if xv.ndim != 3 or wv.ndim != 3 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {xv.shape} and {wv.shape}")
    width, length = wv.shape[2], xv.shape[2]
    if length < width:
        raise ShapeError(f"conv1d: sequence length {length} shorter than filter width {width}")
    n_out = (length - width) // stride + 1
    idx = stride * np.arange(n_out)[:, None] + np.arange(width)[None, :]
    patches = xv[:, :, idx]  # (batch, in, n_out, width)
    out = np.einsum("bctw,ocw->bot", patches, wv, optimize=True)

    def vjp(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.einsum("bot,bctw->ocw", g, patches, optimize=True)
        if x.requires_grad:
            gp = np.einsum("bot,ocw->bctw", g, wv, optimize=True)
            gx = np.zeros_like(xv)
            np.add.at(gx, (slice(None), slice(None), idx), gp)
        return gx, gw
    return make_node(out, "conv1d", (x, w), vjp)


def avg_pool1d(x, width: int) -> Node:
    """Non-overlapping average pooling over the last axis; a ragged tail is dropped."""
    x = _as_node(x)
    xv = x.value
    n_out = xv.shape[-1] // width
    if n_out < 1:
        raise ShapeError(f"avg_pool1d: length {xv.shape[-1]} shorter than pool width {width}")
    used = n_out * width
    out = xv[..., :used].reshape(xv.shape[:-1] + (n_out, width)).mean(axis=-1)

    def vjp(g):
        full = np.zeros_like(xv)
        full[..., :used] = np.repeat(g / width, width, axis=-1)
        return (full,)
    return make_node(out, "avg_pool1d", (x,), vjp)


# ---------------------------------------------------------------------------
# gradient control


def stop_gradient(a) -> Node:
    """Pass the value through; no gradient reaches ``a``."""
    a = _as_node(a)
    return Node(a.value, "stop_gradient")


def scale_grad(a, scale: Node) -> Node:
    """Identity in the forward pass; multiplies the incoming cotangent by ``scale``.

    ``scale.value`` is read when the backward pass runs, so it may be assigned
    after the forward pass has finished.  ``scale`` itself receives no gradient.
    """
    a = _as_node(a)
    return make_node(a.value, "scale_grad", (a,), lambda g: (g * scale.value,))


# ---------------------------------------------------------------------------
# convenience drivers


def forward(fn: Callable[..., Node], **inputs) -> Node:
    """Evaluate ``fn`` on named inputs registered as parameters of a fresh tape.

    The returned root keeps a reference to its tape, so :func:`backward` can be
    called on it directly.
    """
    tape = Tape()
    with tape:
        nodes = {name: tape.param(name, value) for name, value in inputs.items()}
        root = _as_node(fn(**nodes))
    if root.tape is None:
        root.tape = tape
    return root


def backward(root: Node) -> dict[str, np.ndarray]:
    if root.tape is None:
        raise ValueError("root has no tape; build it with forward() or inside a Tape")
    return root.tape.backward(root)


def value_and_grad(fn: Callable[..., Node]) -> Callable[..., tuple[float, dict[str, np.ndarray]]]:
    """Wrap ``fn`` so calling it returns ``(value, {name: gradient})``."""
    def wrapped(**inputs):
        root = forward(fn, **inputs)
        return float(root.value), backward(root)
    return wrapped
