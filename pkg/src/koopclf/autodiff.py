"""Minimal reverse-mode autodiff over numpy arrays.

Each :class:`Var` records its parents and a vector-Jacobian rule written in
terms of other ``Var`` operations, so a backward sweep run with
``create_graph=True`` is itself differentiable. That is what the Lyapunov
risk needs: it differentiates through ``dV/dz``.

Only the handful of ops used by the networks and losses are provided.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class GradientOverflow(FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"non-finite value produced by node '{op}'")


class Var:
    __slots__ = ("value", "parents", "vjp", "op", "__weakref__")

    def __init__(self, value, parents: tuple = (), vjp: Callable | None = None, op: str = "leaf"):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents
        self.vjp = vjp
        self.op = op

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)

    def __truediv__(self, o):
        if isinstance(o, Var):
            raise NotImplementedError("division by a Var is not supported")
        return mul(self, 1.0 / np.asarray(o, dtype=float))

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return transpose(self)


def const(x) -> Var:
    return x if isinstance(x, Var) else Var(x, op="const")


def _node(value, parents, vjp, op) -> Var:
    value = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(value)):
        raise GradientOverflow(op)
    return Var(value, parents, vjp, op)


def _unbroadcast(g: Var, shape) -> Var:
    if g.shape == tuple(shape):
        return g
    ndiff = g.ndim - len(shape)
    axes = tuple(range(ndiff)) + tuple(i + ndiff for i, s in enumerate(shape) if s == 1 and g.shape[i + ndiff] != 1)
    out = vsum(g, axes, keepdims=True) if axes else g
    return reshape(out, shape)


# ---------------------------------------------------------------------------
# ops


def add(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)), "sub")


def neg(a) -> Var:
    return _node(-a.value, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)), "mul")


def matmul(a, b) -> Var:
    """``a @ b`` for operands with at least 2 dims; leading dims broadcast."""
    a, b = const(a), const(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def vjp(g):
        ga = matmul(g, transpose(b))
        gb = matmul(transpose(a), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.value @ b.value, (a, b), vjp, "matmul")


def transpose(a) -> Var:
    """Swap the last two axes."""
    return _node(np.swapaxes(a.value, -1, -2), (a,), lambda g: (transpose(g),), "transpose")


def reshape(a, shape) -> Var:
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (reshape(g, old),), "reshape")


def vsum(a, axis=None, keepdims=False) -> Var:
    shape = a.shape
    if axis is None:
        axes = tuple(range(len(shape)))
    else:
        axes = tuple(ax % len(shape) for ax in np.atleast_1d(axis))
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), shape),)

    return _node(np.sum(a.value, axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def broadcast_to(a, shape) -> Var:
    old = a.shape
    return _node(np.broadcast_to(a.value, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, old),), "broadcast")


def tanh(a) -> Var:
    def vjp(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _node(np.tanh(a.value), (a,), vjp, "tanh")
    return out


def relu(a) -> Var:
    mask = (a.value > 0).astype(float)
    return _node(a.value * mask, (a,), lambda g: (mul(g, mask),), "relu")


def square(a) -> Var:
    return mul(a, a)


def sqrt(a) -> Var:
    def vjp(g):
        return (mul(g, recip_half(out)),)

    out = _node(np.sqrt(a.value), (a,), vjp, "sqrt")
    return out


def recip_half(v: Var) -> Var:
    """``0.5 / v`` as a differentiable node (derivative ``-0.5 / v^2``)."""
    r = 0.5 / v.value

    def vjp(g):
        return (mul(g, -2.0 * r * r),)

    return _node(r, (v,), vjp, "recip_half")


def norm_rows(a, floor: float = 0.0) -> Var:
    """Euclidean norm over the last axis; zero rows get a zero subgradient."""
    sq = vsum(mul(a, a), axis=-1)
    val = np.sqrt(sq.value)
    safe = np.where(val > floor, val, 1.0)
    live = (val > floor).astype(float)

    def vjp(g):
        coef = mul(g, live / safe)
        return (mul(reshape(coef, coef.shape + (1,)), a),)

    return _node(val, (a,), vjp, "norm")


def slice_flat(theta, start: int, stop: int, shape) -> Var:
    """View ``theta[start:stop]`` reshaped to ``shape`` (theta is 1-D)."""
    size = theta.shape[0]

    def vjp(g):
        return (pad_flat(reshape(g, (stop - start,)), start, size),)

    return _node(theta.value[start:stop].reshape(shape), (theta,), vjp, "slice")


def pad_flat(g, start: int, size: int) -> Var:
    n = g.shape[0]

    def vjp(h):
        return (slice_flat(h, start, start + n, (n,)),)

    out = np.zeros(size)
    out[start:start + n] = g.value
    return _node(out, (g,), vjp, "pad")


def take_rows(a, idx) -> Var:
    idx = np.asarray(idx)
    rows = a.shape[0]

    def vjp(g):
        return (scatter_rows(g, idx, rows),)

    return _node(a.value[idx], (a,), vjp, "take")


def scatter_rows(g, idx, rows: int) -> Var:
    def vjp(h):
        return (take_rows(h, idx),)

    out = np.zeros((rows,) + g.shape[1:])
    np.add.at(out, idx, g.value)
    return _node(out, (g,), vjp, "scatter")


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    parts = [const(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        outs = []
        for i, p in enumerate(parts):
            outs.append(take_axis(g, axis, bounds[i], bounds[i + 1]))
        return tuple(outs)

    return _node(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), vjp, "concat")


def take_axis(a, axis: int, start: int, stop: int) -> Var:
    shape = a.shape
    sl = [slice(None)] * len(shape)
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def vjp(g):
        return (embed_axis(g, sl, shape),)

    return _node(a.value[sl], (a,), vjp, "take_axis")


def embed_axis(g, sl, shape) -> Var:
    def vjp(h):
        return (_node(h.value[sl], (h,), lambda k: (embed_axis(k, sl, shape),), "take_axis"),)

    out = np.zeros(shape)
    out[sl] = g.value
    return _node(out, (g,), vjp, "embed")


def mean(a) -> Var:
    return mul(vsum(a), 1.0 / a.value.size)


# ---------------------------------------------------------------------------
# reverse sweep


def _topo(output: Var, stop: set[int] | None = None) -> list[Var]:
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if stop is not None and id(node) in stop:
            continue
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Var, inputs: Sequence[Var], create_graph: bool = False, seed=None):
    """Gradients of ``output`` (summed if not scalar) w.r.t. ``inputs``.

    With ``create_graph=True`` the returned gradients are ``Var`` nodes that
    can be differentiated again; otherwise plain arrays.
    """
    targets = {id(v) for v in inputs}
    order = _topo(output, stop=targets)
    # restrict to nodes that actually depend on one of the inputs
    live = set()
    for node in order:
        if id(node) in targets or any(id(p) in live for p in node.parents):
            live.add(id(node))
    if seed is None:
        seed = np.ones_like(output.value)
    grads: dict[int, Var] = {id(output): Var(seed, op="seed")}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.vjp is None or id(node) in targets:
            continue
        if not create_graph:
            g = Var(g.value, op="detached")
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or id(p) not in live:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for v in inputs:
        g = grads.get(id(v))
        if g is None:
            g = Var(np.zeros_like(v.value), op="zero")
        out.append(g if create_graph else g.value)
    return out
