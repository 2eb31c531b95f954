"""Dense differentiable arrays with reverse-mode gradient propagation.

A DiffTensor wraps a numpy array and, when produced by an operation in
`ctxseg.diffcore.ops`, carries a closure that routes upstream gradients to its
parents. `backward()` runs the closures once each in reverse topological
order. Arithmetic is float32 by default; setting the environment variable
CTXN_VERIFY=1 (or calling `set_verify(True)`) switches new tensors to float64
for gradient verification.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import GraphError, ShapeError

_DTYPE = np.float64 if os.environ.get("CTXN_VERIFY") == "1" else np.float32


def set_verify(enabled: bool) -> None:
    """Switch the arithmetic dtype for tensors created from here on."""
    global _DTYPE
    _DTYPE = np.float64 if enabled else np.float32


def active_dtype():
    return _DTYPE


class verify_mode:
    """Context manager form of `set_verify`, restoring the prior mode on exit."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled

    def __enter__(self):
        self.prev = _DTYPE == np.float64
        set_verify(self.enabled)
        return self

    def __exit__(self, *exc):
        set_verify(self.prev)
        return False


class DiffTensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._spent = False

    @classmethod
    def _node(cls, data, parents, backward) -> "DiffTensor":
        # Internal fast path for op outputs: data is already in the active
        # dtype, so skip the cast and wire the graph directly.
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = any(p.requires_grad for p in parents)
        t._parents = tuple(parents) if t.requires_grad else ()
        t._backward = backward if t.requires_grad else None
        t._spent = False
        return t

    @property
    def shape(self):
        return self.data.shape

    def accum_grad(self, g) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"DiffTensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def backward(loss: DiffTensor) -> None:
    """Accumulate d(loss)/d(t) into `t.grad` for every requires_grad ancestor.

    Each interior node is visited exactly once; running backward a second time
    through the same graph raises GraphError.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        # Constant loss: gradients of a constant are zero everywhere; nothing to do.
        return

    topo: list[DiffTensor] = []
    visited: set[int] = set()
    stack: list[tuple[DiffTensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    if any(t._spent for t in topo):
        raise GraphError("backward was already run through this graph")

    loss.accum_grad(np.ones_like(loss.data))
    for t in reversed(topo):
        if t._backward is not None:
            t._backward()
            t._spent = True
