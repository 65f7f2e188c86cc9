"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Variable` wraps an immutable ``numpy.ndarray`` value. Every op that
touches a Variable with ``requires_grad=True`` records its parents and a
closure mapping the output gradient to parent gradients. :func:`backward`
walks the recorded DAG once, in reverse topological order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np

from cleft.errors import ContractError

DEFAULT_DTYPE = np.float32

_tape_ids = itertools.count()
_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def as_array(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Variable:
    """A value plus gradient storage and a tape record."""

    __slots__ = ("value", "_grad", "requires_grad", "tape_id", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.value = as_array(value, dtype)
        self._grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id = next(_tape_ids)
        self.name = name
        self._parents: Tuple[Variable, ...] = ()
        self._backward: BackwardFn | None = None

    # gradient storage is allocated lazily but reads as zeros
    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g: np.ndarray | None) -> None:
        self._grad = None if g is None else np.asarray(g, dtype=self.value.dtype)

    @property
    def has_grad(self) -> bool:
        return self._grad is not None

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def detach(self) -> "Variable":
        return Variable(self.value, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Variable(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; implementations live in cleft.autograd.ops
    def __add__(self, other):
        from cleft.autograd import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from cleft.autograd import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from cleft.autograd import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from cleft.autograd import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from cleft.autograd import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from cleft.autograd import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from cleft.autograd import ops
        if isinstance(other, Variable):
            return ops.mul(self, ops.reciprocal(other))
        return ops.scale(self, 1.0 / other)

    def __neg__(self):
        from cleft.autograd import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from cleft.autograd import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from cleft.autograd import ops
        return ops.index(self, key)

    @property
    def T(self) -> "Variable":
        from cleft.autograd import ops
        return ops.transpose(self)


def make_node(value: np.ndarray, parents: Sequence[Variable], backward: BackwardFn) -> Variable:
    """Create an op output, recording it on the tape if any parent needs grads."""
    out = Variable(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topo_order(root: Variable) -> list[Variable]:
    order: list[Variable] = []
    seen: set[int] = set()
    stack: list[tuple[Variable, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.tape_id in seen:
            continue
        seen.add(node.tape_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.tape_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Variable) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf.

    Repeated calls accumulate; call ``zero_grad`` on the leaves in between.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.value)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(node.tape_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node._grad = g.copy() if node._grad is None else node._grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.tape_id in grads:
                grads[parent.tape_id] = grads[parent.tape_id] + pg
            else:
                grads[parent.tape_id] = pg
