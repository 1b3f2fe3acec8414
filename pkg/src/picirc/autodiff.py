"""Minimal reverse-mode automatic differentiation on a tape of numpy arrays.

The engine is a Wengert list: every operation appends a record to a
``Tape``, and ``backward`` replays the records in reverse, accumulating
vector-Jacobian products.  Only the primitives needed by this package are
implemented: elementwise arithmetic, matrix products, the transcendental
functions used by the nets, logsumexp, gather, reductions, and two shape
utilities (reshape, interleave).  Every primitive registers its backward
rule up front; recording an op with no registered rule fails immediately
rather than silently producing zero gradients.

Values that are not registered as parameters (constants: data batches,
quadrature points and weights, Fourier frequency matrices) never receive
gradients.
"""

from __future__ import annotations

import numpy as np

_BACKWARD = {}


def _backward_rule(name):
    def deco(fn):
        _BACKWARD[name] = fn
        return fn

    return deco


class Node:
    """A value on the tape. Holds a float64 array and a gradient flag."""

    __slots__ = ("tape", "data", "needs_grad", "idx")

    def __init__(self, tape, data, needs_grad, idx):
        self.tape = tape
        self.data = data
        self.needs_grad = needs_grad
        self.idx = idx

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def _lift(self, other):
        if isinstance(other, Node):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return add(self, neg(self._lift(other)))

    def __rsub__(self, other):
        return add(self._lift(other), neg(self))

    def __mul__(self, other):
        return multiply(self, self._lift(other))

    def __rmul__(self, other):
        return multiply(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __repr__(self):
        return f"Node(shape={self.data.shape}, needs_grad={self.needs_grad})"


class Tape:
    """Operation recorder and parameter registry for one forward pass."""

    def __init__(self):
        self._records = []
        self._nodes = []
        self._params = {}

    def _new_node(self, data, needs_grad):
        arr = np.asarray(data, dtype=np.float64)
        node = Node(self, arr, needs_grad, len(self._nodes))
        self._nodes.append(node)
        return node

    def const(self, value) -> Node:
        """A non-learnable value; it will never receive a gradient."""
        return self._new_node(value, needs_grad=False)

    def param(self, name: str, value) -> Node:
        """Register a learnable array under a unique name."""
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered on this tape")
        node = self._new_node(value, needs_grad=True)
        self._params[name] = node
        return node

    def record(self, op_name, out_data, inputs, ctx) -> Node:
        if op_name not in _BACKWARD:
            raise NotImplementedError(
                f"primitive {op_name!r} has no registered backward rule"
            )
        needs = any(inp.needs_grad for inp in inputs)
        out = self._new_node(out_data, needs)
        if needs:
            self._records.append((op_name, out.idx, tuple(i.idx for i in inputs), ctx))
        return out

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss with respect to every registered parameter."""
        if loss.tape is not self:
            raise ValueError("loss node belongs to a different tape")
        if loss.data.shape != ():
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[loss.idx] = np.ones(())
        for op_name, out_idx, in_idxs, ctx in reversed(self._records):
            g = grads[out_idx]
            if g is None:
                continue
            contribs = _BACKWARD[op_name](ctx, g)
            for idx, contrib in zip(in_idxs, contribs):
                if contrib is None or not self._nodes[idx].needs_grad:
                    continue
                if grads[idx] is None:
                    grads[idx] = np.array(contrib, dtype=np.float64, copy=True)
                else:
                    grads[idx] += contrib
        out = {}
        for name, node in self._params.items():
            g = grads[node.idx]
            out[name] = np.zeros_like(node.data) if g is None else g
        return out


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    return tape.backward(loss)


def _unbroadcast(g, shape):
    """Sum a broadcasted gradient back down to the original shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Node, b: Node) -> Node:
    return a.tape.record("add", a.data + b.data, (a, b), (a.data.shape, b.data.shape))


@_backward_rule("add")
def _add_bwd(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def neg(a: Node) -> Node:
    return a.tape.record("neg", -a.data, (a,), None)


@_backward_rule("neg")
def _neg_bwd(ctx, g):
    return (-g,)


def multiply(a: Node, b: Node) -> Node:
    return a.tape.record("multiply", a.data * b.data, (a, b), (a.data, b.data))


@_backward_rule("multiply")
def _multiply_bwd(ctx, g):
    da, db = ctx
    return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)


def matmul(a: Node, b: Node) -> Node:
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError(f"matmul supports 1-D/2-D operands, got {a.ndim}-D @ {b.ndim}-D")
    return a.tape.record("matmul", a.data @ b.data, (a, b), (a.data, b.data))


@_backward_rule("matmul")
def _matmul_bwd(ctx, g):
    da, db = ctx
    if da.ndim == 2 and db.ndim == 2:
        return g @ db.T, da.T @ g
    if da.ndim == 2 and db.ndim == 1:
        return np.outer(g, db), da.T @ g
    if da.ndim == 1 and db.ndim == 2:
        return db @ g, np.outer(da, g)
    return g * db, g * da


def sin(a: Node) -> Node:
    return a.tape.record("sin", np.sin(a.data), (a,), a.data)


@_backward_rule("sin")
def _sin_bwd(ctx, g):
    return (g * np.cos(ctx),)


def cos(a: Node) -> Node:
    return a.tape.record("cos", np.cos(a.data), (a,), a.data)


@_backward_rule("cos")
def _cos_bwd(ctx, g):
    return (-g * np.sin(ctx),)


def exp(a: Node) -> Node:
    out = np.exp(a.data)
    return a.tape.record("exp", out, (a,), out)


@_backward_rule("exp")
def _exp_bwd(ctx, g):
    return (g * ctx,)


def log(a: Node) -> Node:
    return a.tape.record("log", np.log(a.data), (a,), a.data)


@_backward_rule("log")
def _log_bwd(ctx, g):
    return (g / ctx,)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Node) -> Node:
    out = _sigmoid(np.asarray(a.data, dtype=np.float64))
    return a.tape.record("sigmoid", out, (a,), out)


@_backward_rule("sigmoid")
def _sigmoid_bwd(ctx, g):
    return (g * ctx * (1.0 - ctx),)


def softplus(a: Node) -> Node:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return a.tape.record("softplus", out, (a,), x)


@_backward_rule("softplus")
def _softplus_bwd(ctx, g):
    return (g * _sigmoid(ctx),)


def _logsumexp_data(x, axis, keepdims):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    if not keepdims and axis is not None:
        out = np.squeeze(out, axis=axis)
    elif not keepdims:
        out = out.reshape(())
    return out


def logsumexp(a: Node, axis=None, keepdims=False) -> Node:
    out = _logsumexp_data(a.data, axis, keepdims)
    return a.tape.record("logsumexp", out, (a,), (a.data, out, axis, keepdims))


@_backward_rule("logsumexp")
def _logsumexp_bwd(ctx, g):
    x, out, axis, keepdims = ctx
    if not keepdims:
        if axis is None:
            out_e = out.reshape((1,) * x.ndim)
            g_e = np.asarray(g).reshape((1,) * x.ndim)
        else:
            out_e = np.expand_dims(out, axis)
            g_e = np.expand_dims(g, axis)
    else:
        out_e, g_e = out, g
    with np.errstate(invalid="ignore"):
        p = np.where(np.isneginf(x), 0.0, np.exp(x - out_e))
    return (g_e * p,)


def gather(a: Node, index, axis=0) -> Node:
    index = np.asarray(index, dtype=np.intp)
    out = np.take(a.data, index, axis=axis)
    return a.tape.record("gather", out, (a,), (a.data.shape, index, axis))


@_backward_rule("gather")
def _gather_bwd(ctx, g):
    shape, index, axis = ctx
    out = np.zeros(shape)
    sel = (slice(None),) * axis + (index,)
    np.add.at(out, sel, g)
    return (out,)


def reduce_sum(a: Node, axis=None, keepdims=False) -> Node:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return a.tape.record("sum", out, (a,), (a.data.shape, axis, keepdims))


@_backward_rule("sum")
def _sum_bwd(ctx, g):
    shape, axis, keepdims = ctx
    g = np.asarray(g)
    if not keepdims:
        if axis is None:
            g = g.reshape((1,) * len(shape))
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            for ax in sorted(ax % len(shape) for ax in axes):
                g = np.expand_dims(g, ax)
    return (np.broadcast_to(g, shape),)


def mean(a: Node, axis=None) -> Node:
    total = reduce_sum(a, axis=axis)
    count = a.data.size if axis is None else a.data.shape[axis]
    return multiply(total, a.tape.const(1.0 / count))


def reshape(a: Node, shape) -> Node:
    return a.tape.record("reshape", a.data.reshape(shape), (a,), a.data.shape)


@_backward_rule("reshape")
def _reshape_bwd(ctx, g):
    return (np.asarray(g).reshape(ctx),)


def interleave(a: Node, b: Node) -> Node:
    """Alternate two equal-shape arrays along the last axis: a0 b0 a1 b1 ..."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"interleave needs equal shapes, got {a.shape} and {b.shape}")
    out = np.empty(a.data.shape[:-1] + (2 * a.data.shape[-1],))
    out[..., 0::2] = a.data
    out[..., 1::2] = b.data
    return a.tape.record("interleave", out, (a, b), None)


@_backward_rule("interleave")
def _interleave_bwd(ctx, g):
    return g[..., 0::2], g[..., 1::2]


def tanh(a: Node) -> Node:
    """Composed from sigmoid: tanh(x) = 2 sigmoid(2x) - 1."""
    two_x = multiply(a, a.tape.const(2.0))
    return add(multiply(sigmoid(two_x), a.tape.const(2.0)), a.tape.const(-1.0))
