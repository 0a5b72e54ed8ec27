"""Reverse-mode autodiff over numpy arrays.

A Tensor wraps a value array plus an optional backward closure linking it
to its parents. Calling ``backward()`` on a scalar tensor topologically
sorts the graph and accumulates gradients into every reachable tensor that
requires them. Gradients always accumulate (+=), never overwrite, so
shared subexpressions and multi-use parameters are handled correctly.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: Iterable["Tensor"] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
    ):
        self.value = np.asarray(value)
        parents = tuple(parents)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in parents
        )
        self.grad: np.ndarray | None = None
        # graph edges are only retained where gradients can flow
        self._parents = parents if self.requires_grad else ()
        self._backward_fn = backward_fn if self.requires_grad else None

    # -- graph mechanics ----------------------------------------------------

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = np.asarray(g)
        if g.shape != self.value.shape:
            raise ValueError(
                f"gradient shape {g.shape} != value shape {self.value.shape}"
            )
        if g.dtype != self.value.dtype:
            g = g.astype(self.value.dtype)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that requires no gradient")
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without seed needs a scalar tensor")
            grad = np.ones_like(self.value)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(np.asarray(grad, dtype=self.value.dtype))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- conveniences ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype}{flag})"

    # operator sugar delegates to archseg.autodiff.ops (imported lazily to
    # keep the module dependency one-directional)

    def _ops(self):
        from archseg.autodiff import ops

        return ops

    def __add__(self, other):
        return self._ops().add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return self._ops().mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self._ops().mul(self, -1.0)

    def __sub__(self, other):
        return self._ops().add(self, -as_tensor(other))

    def __rsub__(self, other):
        return self._ops().add(as_tensor(other), -self)

    def __truediv__(self, other):
        return self._ops().div(self, other)

    def __rtruediv__(self, other):
        return self._ops().div(as_tensor(other), self)

    def __pow__(self, exponent):
        return self._ops().power(self, exponent)

    def __matmul__(self, other):
        return self._ops().matmul(self, other)

    def __getitem__(self, idx):
        return self._ops().index(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return self._ops().tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return self._ops().tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return self._ops().reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))
