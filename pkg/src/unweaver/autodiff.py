"""Tiny reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray and records how it was produced. Calling
:meth:`Tensor.backward` on a scalar result walks the tape in reverse
topological order and accumulates gradients into every tensor created with
``requires_grad=True``. Graph nodes whose inputs carry no gradient are pruned
at creation time, so pure inference builds no tape at all.

Supported array ranks are 1-3; ``matmul`` requires rank >= 2 (batched on the
leading axis for rank 3). Broadcasting follows numpy semantics, with
gradients summed back down to the operand shapes.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray

_SERIAL = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_serial")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data: Array = arr
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], Sequence[Array | None]] | None = None
        self._serial = next(_SERIAL)

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _make(data: Array, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._serial = next(_SERIAL)
        needs_grad = False
        for p in parents:
            if p.requires_grad:
                needs_grad = True
                break
        out.requires_grad = needs_grad
        if needs_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        data = self.data + other.data
        def bw(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))
        return Tensor._make(data, (self, other), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other, self.dtype)
        data = self.data - other.data
        def bw(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape))
        return Tensor._make(data, (self, other), bw)

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        data = self.data * other.data
        a, b = self.data, other.data
        def bw(g):
            return (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape))
        return Tensor._make(data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other, self.dtype)
        data = self.data / other.data
        a, b = self.data, other.data
        def bw(g):
            return (
                _unbroadcast(g / b, self.shape),
                _unbroadcast(-g * a / (b * b), other.shape),
            )
        return Tensor._make(data, (self, other), bw)

    def __rtruediv__(self, other):
        return _as_tensor(other, self.dtype) / self

    def __neg__(self):
        def bw(g):
            return (-g,)
        return Tensor._make(-self.data, (self,), bw)

    def __pow__(self, exponent: float):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        data = self.data ** exponent
        base = self.data
        def bw(g):
            return (g * exponent * base ** (exponent - 1.0),)
        return Tensor._make(data, (self,), bw)

    def __matmul__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul requires rank >= 2 operands")
        data = a @ b
        def bw(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))
        return Tensor._make(data, (self, other), bw)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape: int):
        old = self.shape
        def bw(g):
            return (g.reshape(old),)
        return Tensor._make(self.data.reshape(shape), (self,), bw)

    def transpose(self, *axes: int):
        inv = np.argsort(axes)
        def bw(g):
            return (g.transpose(inv),)
        return Tensor._make(self.data.transpose(axes), (self,), bw)

    def __getitem__(self, key):
        data = self.data[key]
        shape = self.shape
        def bw(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[key] = g
            return (full,)
        return Tensor._make(data, (self,), bw)

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape
        def bw(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape).copy(),)
        return Tensor._make(data, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            count = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    # -- elementwise nonlinearities ------------------------------------------

    def exp(self):
        data = np.exp(self.data)
        def bw(g):
            return (g * data,)
        return Tensor._make(data, (self,), bw)

    def log(self):
        base = self.data
        def bw(g):
            return (g / base,)
        return Tensor._make(np.log(base), (self,), bw)

    def sqrt(self):
        data = np.sqrt(self.data)
        def bw(g):
            return (g * 0.5 / data,)
        return Tensor._make(data, (self,), bw)

    def tanh(self):
        data = np.tanh(self.data)
        def bw(g):
            return (g * (1.0 - data * data),)
        return Tensor._make(data, (self,), bw)

    def sigmoid(self):
        data = 1.0 / (1.0 + np.exp(-self.data))
        def bw(g):
            return (g * data * (1.0 - data),)
        return Tensor._make(data, (self,), bw)

    def relu(self):
        mask = self.data > 0
        def bw(g):
            return (g * mask,)
        return Tensor._make(self.data * mask, (self,), bw)

    def clamp_min(self, floor: float):
        mask = self.data > floor
        def bw(g):
            return (g * mask,)
        return Tensor._make(np.maximum(self.data, floor), (self,), bw)

    # -- backward pass --------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar output")
        # Nodes are created after their parents, so descending creation order
        # is a valid reverse-topological order of the reachable graph.
        nodes: list[Tensor] = []
        seen: set[int] = {id(self)}
        stack: list[Tensor] = [self]
        while stack:
            node = stack.pop()
            nodes.append(node)
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append(parent)
        nodes.sort(key=lambda n: n._serial, reverse=True)
        self.grad = np.ones_like(self.data)
        for node in nodes:
            bw = node._backward
            if bw is None:
                continue
            grads = bw(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
        # Free the tape so repeated forward passes don't leak references.
        for node in nodes:
            if node is not self:
                node._backward = None
                node._parents = ()


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- composite helpers ---------------------------------------------------------


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor._make(data, tuple(parts), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction) with a fused backward."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    def bw(g):
        tmp = g * s
        return (tmp - s * tmp.sum(axis=axis, keepdims=True),)
    return Tensor._make(s, (x,), bw)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with a fused backward (b broadcasts over rows)."""
    data = x.data @ w.data + b.data
    def bw(g):
        return (
            g @ w.data.T,
            _unbroadcast(np.swapaxes(x.data, -1, -2) @ g, w.data.shape),
            _unbroadcast(g, b.data.shape),
        )
    return Tensor._make(data, (x, w, b), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift. Fused backward."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gain.data * xhat + bias.data
    n = x.data.shape[-1]
    def bw(g):
        dxhat = g * gain.data
        dx = (inv / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return (
            dx,
            _unbroadcast(g * xhat, gain.data.shape),
            _unbroadcast(g, bias.data.shape),
        )
    return Tensor._make(out, (x, gain, bias), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; a no-op at rate 0."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep)
