"""Minimal reverse-mode differentiation over small dense computation graphs.

The primitive set is deliberately tiny: masked affine maps, tanh, clamped
exp/log, add/multiply with limited broadcasting, sum/mean/logsumexp/softmax
reductions, concatenation and row gathering. Everything is float64 and
single-threaded; two runs on identical inputs produce bit-identical values
and gradients.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, StateError

LOG_EPS = 1e-12

_param_ids = itertools.count()


class Parameter:
    """Trainable float64 array with a gradient accumulator of the same shape."""

    def __init__(self, values, name: str = ""):
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.id = next(_param_ids)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter(id={self.id}, name={self.name!r}, shape={self.values.shape})"


class Node:
    """One value in the computation graph. Created only through Tape methods."""

    __slots__ = ("value", "op", "inputs", "aux", "grad")

    def __init__(self, value, op, inputs=(), aux=None):
        self.value = value
        self.op = op
        self.inputs = inputs
        self.aux = aux
        self.grad = None

    @property
    def shape(self):
        return self.value.shape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(node: Node, grad: np.ndarray):
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += _unbroadcast(grad, node.value.shape)


def _softmax(values: np.ndarray, axis) -> np.ndarray:
    shifted = values - values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class Tape:
    """Ordered record of primitive operations; consumed by one backward pass.

    Creation order is a topological order of the graph, so the reversed tape
    visits every node after all of its consumers.
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._param_leaves: dict[int, Node] = {}
        self._consumed = False

    # ----- leaves ---------------------------------------------------------

    def param(self, p: Parameter) -> Node:
        """Leaf node bound to a Parameter; gradients land in p.grad."""
        leaf = self._param_leaves.get(p.id)
        if leaf is None:
            leaf = self._record(Node(p.values, "param", aux=p))
            self._param_leaves[p.id] = leaf
        return leaf

    def const(self, value) -> Node:
        return self._record(Node(np.asarray(value, dtype=np.float64), "const"))

    def _as_node(self, x) -> Node:
        if isinstance(x, Node):
            return x
        if isinstance(x, Parameter):
            return self.param(x)
        return self.const(x)

    def _record(self, node: Node) -> Node:
        if self._consumed:
            raise StateError("tape already consumed by backward()")
        self._nodes.append(node)
        return node

    # ----- primitives -----------------------------------------------------

    def affine(self, x, w, b=None, mask: Optional[np.ndarray] = None) -> Node:
        """x @ (w * mask).T + b for a 2-D weight w; mask defaults to all-ones."""
        x, w = self._as_node(x), self._as_node(w)
        if mask is not None:
            mask = np.asarray(mask, dtype=np.float64)
            if mask.shape != w.value.shape:
                raise DimensionError(
                    f"mask shape {mask.shape} does not match weight shape {w.value.shape}"
                )
        if x.value.ndim != 2 or w.value.ndim != 2 or x.value.shape[1] != w.value.shape[1]:
            raise DimensionError(
                f"affine operands incompatible: input {x.value.shape}, weight {w.value.shape}"
            )
        wm = w.value if mask is None else w.value * mask
        out = x.value @ wm.T
        inputs = (x, w)
        if b is not None:
            b = self._as_node(b)
            if b.value.shape[-1] != w.value.shape[0]:
                raise DimensionError(
                    f"bias shape {b.value.shape} does not match output width {w.value.shape[0]}"
                )
            out = out + b.value
            inputs = (x, w, b)
        return self._record(Node(out, "affine", inputs, aux=mask))

    def tanh(self, x) -> Node:
        x = self._as_node(x)
        return self._record(Node(np.tanh(x.value), "tanh", (x,)))

    def exp(self, x) -> Node:
        x = self._as_node(x)
        return self._record(Node(np.exp(x.value), "exp", (x,)))

    def log(self, x, eps: float = LOG_EPS) -> Node:
        """log(max(x, eps)); the clamp keeps probabilities differentiable at 0."""
        x = self._as_node(x)
        clamped = np.maximum(x.value, eps)
        return self._record(Node(np.log(clamped), "log", (x,), aux=(clamped, eps)))

    def add(self, a, b) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        try:
            out = a.value + b.value
        except ValueError as exc:
            raise DimensionError(f"add operands {a.value.shape} and {b.value.shape}") from exc
        return self._record(Node(out, "add", (a, b)))

    def mul(self, a, b) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        try:
            out = a.value * b.value
        except ValueError as exc:
            raise DimensionError(f"mul operands {a.value.shape} and {b.value.shape}") from exc
        return self._record(Node(out, "mul", (a, b)))

    def sum(self, x, axis=None, keepdims: bool = False) -> Node:
        x = self._as_node(x)
        out = x.value.sum(axis=axis, keepdims=keepdims)
        return self._record(Node(np.asarray(out), "sum", (x,), aux=(axis, keepdims)))

    def mean(self, x, axis=None, keepdims: bool = False) -> Node:
        x = self._as_node(x)
        out = x.value.mean(axis=axis, keepdims=keepdims)
        return self._record(Node(np.asarray(out), "mean", (x,), aux=(axis, keepdims)))

    def logsumexp(self, x, axis=None, keepdims: bool = False) -> Node:
        """max + log sum exp(x - max); stable for large magnitudes."""
        x = self._as_node(x)
        if x.value.size == 0:
            raise ContractError("logsumexp of an empty array")
        if np.isnan(x.value).any():
            raise NumericError("logsumexp input contains NaN")
        m = x.value.max(axis=axis, keepdims=True)
        out = m + np.log(np.exp(x.value - m).sum(axis=axis, keepdims=True))
        if not keepdims:
            out = out.reshape(np.asarray(x.value.sum(axis=axis)).shape)
        return self._record(Node(np.asarray(out), "logsumexp", (x,), aux=(axis, keepdims)))

    def softmax(self, x, axis=-1) -> Node:
        x = self._as_node(x)
        return self._record(Node(_softmax(x.value, axis), "softmax", (x,), aux=axis))

    def concat(self, parts: Sequence, axis: int = 1) -> Node:
        nodes = tuple(self._as_node(p) for p in parts)
        out = np.concatenate([n.value for n in nodes], axis=axis)
        widths = [n.value.shape[axis] for n in nodes]
        return self._record(Node(out, "concat", nodes, aux=(axis, widths)))

    def gather_rows(self, x, indices) -> Node:
        """Select rows x[indices]; scatter-adds gradients back."""
        x = self._as_node(x)
        idx = np.asarray(indices, dtype=np.intp)
        return self._record(Node(x.value[idx], "gather", (x,), aux=idx))

    # ----- reverse pass ---------------------------------------------------

    def backward(self, out: Node):
        """Accumulate d(out)/d(parameter) into every bound Parameter's .grad."""
        if self._consumed:
            raise StateError("backward() called on a consumed tape")
        if out.value.size != 1:
            raise ContractError(f"backward requires a scalar output, got shape {out.value.shape}")
        self._consumed = True
        out.grad = np.ones_like(out.value)
        for node in reversed(self._nodes):
            if node.grad is None or node.op in ("const", "param"):
                continue
            _VJP[node.op](node)
        for leaf in self._param_leaves.values():
            if leaf.grad is not None:
                leaf.aux.grad += leaf.grad


# ----- vector-Jacobian products ------------------------------------------


def _vjp_affine(node: Node):
    g = node.grad
    x, w = node.inputs[0], node.inputs[1]
    mask = node.aux
    wm = w.value if mask is None else w.value * mask
    _accumulate(x, g @ wm)
    gw = g.T @ x.value
    if mask is not None:
        gw = gw * mask
    _accumulate(w, gw)
    if len(node.inputs) == 3:
        _accumulate(node.inputs[2], g.sum(axis=0))


def _vjp_tanh(node: Node):
    _accumulate(node.inputs[0], node.grad * (1.0 - node.value**2))


def _vjp_exp(node: Node):
    _accumulate(node.inputs[0], node.grad * node.value)


def _vjp_log(node: Node):
    clamped, eps = node.aux
    x = node.inputs[0]
    active = x.value >= eps
    _accumulate(x, node.grad * active / clamped)


def _vjp_add(node: Node):
    _accumulate(node.inputs[0], node.grad)
    _accumulate(node.inputs[1], node.grad)


def _vjp_mul(node: Node):
    a, b = node.inputs
    _accumulate(a, node.grad * b.value)
    _accumulate(b, node.grad * a.value)


def _expand_reduced(grad: np.ndarray, src: Node, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(grad.reshape(()), src.value.shape)
    if not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, src.value.shape)


def _vjp_sum(node: Node):
    axis, keepdims = node.aux
    x = node.inputs[0]
    _accumulate(x, _expand_reduced(node.grad, x, axis, keepdims))


def _vjp_mean(node: Node):
    axis, keepdims = node.aux
    x = node.inputs[0]
    n = x.value.size if axis is None else x.value.shape[axis]
    _accumulate(x, _expand_reduced(node.grad, x, axis, keepdims) / n)


def _vjp_logsumexp(node: Node):
    axis, keepdims = node.aux
    x = node.inputs[0]
    soft = _softmax(x.value, axis) if axis is not None else _softmax(x.value.reshape(-1), 0).reshape(x.value.shape)
    _accumulate(x, _expand_reduced(node.grad, x, axis, keepdims) * soft)


def _vjp_softmax(node: Node):
    axis = node.aux
    y, g = node.value, node.grad
    inner = (g * y).sum(axis=axis, keepdims=True)
    _accumulate(node.inputs[0], y * (g - inner))


def _vjp_concat(node: Node):
    axis, widths = node.aux
    start = 0
    for part, width in zip(node.inputs, widths):
        sl = [slice(None)] * node.value.ndim
        sl[axis] = slice(start, start + width)
        _accumulate(part, node.grad[tuple(sl)])
        start += width


def _vjp_gather(node: Node):
    x, idx = node.inputs[0], node.aux
    gx = np.zeros_like(x.value)
    np.add.at(gx, idx, node.grad)
    _accumulate(x, gx)


_VJP: dict[str, Callable[[Node], None]] = {
    "affine": _vjp_affine,
    "tanh": _vjp_tanh,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "add": _vjp_add,
    "mul": _vjp_mul,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "logsumexp": _vjp_logsumexp,
    "softmax": _vjp_softmax,
    "concat": _vjp_concat,
    "gather": _vjp_gather,
}


# ----- finite-difference verifier ------------------------------------------


def check_gradients(build, params: Sequence[Parameter], h: float = 1e-5,
                    floor: float = 1e-2) -> float:
    """Compare analytic gradients against central finite differences.

    `build()` must construct a fresh tape from the current parameter values and
    return (tape, scalar output node). Returns the worst scaled error
    |analytic - fd| / max(|analytic|, |fd|, floor) over all parameter entries;
    the floor keeps near-zero entries from amplifying quadrature noise.
    """
    tape, out = build()
    for p in params:
        p.zero_grad()
    tape.backward(out)
    analytic = [p.grad.copy() for p in params]

    def value() -> float:
        _, node = build()
        return float(node.value)

    worst = 0.0
    for p, ref in zip(params, analytic):
        flat = p.values.reshape(-1)
        ref_flat = ref.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = value()
            flat[i] = orig - h
            f_minus = value()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(ref_flat[i] - fd) / max(abs(ref_flat[i]), abs(fd), floor)
            worst = max(worst, err)
    return worst
