"""Differentiable primitives.

Every function accepts Variables or array-likes (treated as constants) and
returns a Variable. Broadcasting follows numpy rules; gradients are summed
back onto the operand shape.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from cleft.autograd.variable import Variable, as_array, make_node
from cleft.errors import ContractError, DimensionError

_GELU_C = math.sqrt(2.0 / math.pi)


def _var(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Variable, b: Variable, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise ------------------------------------------------------------

def add(a, b) -> Variable:
    a, b = _var(a), _var(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_node(a.value + b.value, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Variable:
    a, b = _var(a), _var(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_node(a.value - b.value, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Variable:
    a, b = _var(a), _var(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value

    def bw(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return make_node(av * bv, (a, b), bw)


def scale(a, c: float) -> Variable:
    a = _var(a)
    c = a.value.dtype.type(c)
    return make_node(a.value * c, (a,), lambda g: (g * c,))


def reciprocal(a) -> Variable:
    a = _var(a)
    out = 1.0 / a.value
    return make_node(out, (a,), lambda g: (-g * out * out,))


def exp(a) -> Variable:
    a = _var(a)
    out = np.exp(a.value)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a) -> Variable:
    a = _var(a)
    av = a.value
    return make_node(np.log(av), (a,), lambda g: (g / av,))


def gelu(a) -> Variable:
    """GELU, tanh approximation."""
    a = _var(a)
    x = a.value
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3.0 * k * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_node(out.astype(x.dtype, copy=False), (a,), bw)


# --- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Variable:
    a, b = _var(a), _var(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ for shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise DimensionError(f"matmul: batch dims differ for shapes {a.shape} and {b.shape}") from None
    av, bv = a.value, b.value

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return make_node(out, (a, b), bw)


def transpose(a, axes: Sequence[int] | None = None) -> Variable:
    """Permute axes; the default swaps the last two."""
    a = _var(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Variable:
    a = _var(a)
    src = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return make_node(out, (a,), lambda g: (g.reshape(src),))


def broadcast_to(a, shape: Sequence[int]) -> Variable:
    a = _var(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {src} to {tuple(shape)}") from None
    return make_node(out, (a,), lambda g: (_unbroadcast(g, src),))


def concat(xs: Sequence, axis: int = 0) -> Variable:
    xs = [_var(x) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, xs, bw)


def index(a, key) -> Variable:
    """``a[key]`` for basic or integer-array indexing; gradient scatter-adds."""
    a = _var(a)
    out = a.value[key]

    def bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        return (full,)

    return make_node(np.array(out, copy=True), (a,), bw)


def embedding(table, ids) -> Variable:
    """Row lookup ``table[ids]`` with scatter-add gradient into the table."""
    table = _var(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    return index(table, ids)


def diagonal(a) -> Variable:
    """Main diagonal of the last two (square) axes."""
    a = _var(a)
    n = a.shape[-1]
    if a.ndim < 2 or a.shape[-2] != n:
        raise DimensionError(f"diagonal needs square trailing axes, got {a.shape}")
    out = np.diagonal(a.value, axis1=-2, axis2=-1).copy()

    def bw(g):
        full = np.zeros_like(a.value)
        idx = np.arange(n)
        full[..., idx, idx] = g
        return (full,)

    return make_node(out, (a,), bw)


# --- reductions -------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Variable:  # noqa: A001
    a = _var(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)
    src = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return make_node(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Variable:
    a = _var(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Variable:
    a = _var(a)
    x = a.value
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    p = e / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return make_node(out if keepdims else np.squeeze(out, axis=axis), (a,), bw)


# --- normalisation and probabilities ----------------------------------------

def softmax(a, axis: int = -1) -> Variable:
    a = _var(a)
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Variable:
    a = _var(a)
    x = a.value
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Variable:
    """Normalise over the last axis (biased variance), then apply ``gamma``/``beta``."""
    x, gamma, beta = _var(x), _var(gamma), _var(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match d={d}")
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xv.dtype.type(eps))
    xhat = xc * inv
    gv = gamma.value
    out = xhat * gv + beta.value

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gv
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gv.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, gv.shape)
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), bw)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Variable:
    """``a / max(||a||, eps)``; an all-zero row stays zero."""
    a = _var(a)
    x = a.value
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, x.dtype.type(eps))
    out = x / denom
    live = norm > eps

    def bw(g):
        radial = (g * out).sum(axis=axis, keepdims=True)
        return ((g - np.where(live, out * radial, 0.0)) / denom,)

    return make_node(out, (a,), bw)


def cross_entropy(logits, targets) -> Variable:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    logits = _var(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [N, C] logits, got {logits.shape}")
    targets = np.asarray(targets)
    n, c = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"cross_entropy: {targets.shape} targets for {n} rows")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"cross_entropy target out of range [0, {c})")
    logp = log_softmax(logits, axis=-1)
    picked = index(logp, (np.arange(n), targets))
    return scale(sum(picked), -1.0 / n)


def constant(x, dtype=None) -> Variable:
    return Variable(as_array(x, dtype))
