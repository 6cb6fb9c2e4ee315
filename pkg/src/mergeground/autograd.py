"""Minimal reverse-mode automatic differentiation over numpy arrays.

Covers exactly the operations the grounding network needs: broadcasting
arithmetic, matrix products, softmax, sigmoid, log, reductions, slicing,
concatenation and clipping. Everything is computed in float64.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """A forward pass or loss produced non-finite values."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` back down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # Make `ndarray <op> Tensor` defer to the reflected Tensor operators
    # instead of numpy broadcasting over the Tensor object.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basics ----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Backpropagate from a scalar tensor through the recorded graph."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = _make(self.data + other.data, (self, other))
        if out.requires_grad:
            def backward(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g, b.data.shape))
            out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = _make(-self.data, (self,))
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accumulate(-g)
        return out

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = _make(self.data * other.data, (self, other))
        if out.requires_grad:
            def backward(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g * a.data, b.data.shape))
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a constant reciprocal")
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = _make(self.data @ other.data, (self, other))
        if out.requires_grad:
            def backward(g, a=self, b=other):
                if a.requires_grad:
                    ga = g @ np.swapaxes(b.data, -1, -2)
                    a._accumulate(_unbroadcast(ga, a.data.shape))
                if b.requires_grad:
                    gb = np.swapaxes(a.data, -1, -2) @ g
                    b._accumulate(_unbroadcast(gb, b.data.shape))
            out._backward = backward
        return out

    def __rmatmul__(self, other) -> "Tensor":
        return as_tensor(other) @ self

    # -- shape manipulation -------------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        out = _make(self.data.reshape(*shape), (self,))
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accumulate(g.reshape(a.data.shape))
        return out

    def swapaxes(self, ax1: int, ax2: int) -> "Tensor":
        out = _make(np.swapaxes(self.data, ax1, ax2), (self,))
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accumulate(np.swapaxes(g, ax1, ax2))
        return out

    def __getitem__(self, index) -> "Tensor":
        out = _make(self.data[index], (self,))
        if out.requires_grad:
            def backward(g, a=self):
                full = np.zeros_like(a.data)
                np.add.at(full, index, g)
                a._accumulate(full)
            out._backward = backward
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            def backward(g, a=self):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise nonlinearities ------------------------------------------

    def exp(self) -> "Tensor":
        out = _make(np.exp(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda g, a=self, y=out.data: a._accumulate(g * y)
        return out

    def log(self) -> "Tensor":
        out = _make(np.log(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accumulate(g / a.data)
        return out

    def sigmoid(self) -> "Tensor":
        x = self.data
        y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out = _make(y, (self,))
        if out.requires_grad:
            out._backward = lambda g, a=self, y=y: a._accumulate(g * y * (1.0 - y))
        return out

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)
        out = _make(y, (self,))
        if out.requires_grad:
            def backward(g, a=self, y=y):
                inner = (g * y).sum(axis=axis, keepdims=True)
                a._accumulate(y * (g - inner))
            out._backward = backward
        return out

    def pow(self, exponent: float) -> "Tensor":
        out = _make(self.data ** exponent, (self,))
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accumulate(
                g * exponent * a.data ** (exponent - 1.0))
        return out

    def clip(self, lo: float, hi: float) -> "Tensor":
        out = _make(np.clip(self.data, lo, hi), (self,))
        if out.requires_grad:
            mask = (self.data >= lo) & (self.data <= hi)
            out._backward = lambda g, a=self, m=mask: a._accumulate(g * m)
        return out


def _make(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    grad_parents = tuple(p for p in parents if p.requires_grad)
    out = Tensor(data, requires_grad=bool(grad_parents))
    out._parents = grad_parents
    return out


def as_tensor(value) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data) -> Tensor:
    """A leaf tensor that participates in gradient computation."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tensors)
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def backward(g, parts=tensors, offsets=offsets):
            for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    index = [slice(None)] * g.ndim
                    index[axis] = slice(lo, hi)
                    t._accumulate(g[tuple(index)])
        out._backward = backward
    return out
