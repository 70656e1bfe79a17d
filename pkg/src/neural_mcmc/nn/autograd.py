"""Tape-free reverse-mode differentiation over dense float64 arrays.

A :class:`Tensor` wraps a 2-D (or scalar-shaped) ``numpy`` array and records
the operation that produced it.  Calling :meth:`Tensor.backward` on a scalar
walks the recorded graph in reverse topological order and accumulates
``grad`` on every node that requires it.

The elementwise helpers (:func:`exp`, :func:`tanh`, ...) accept either a
``Tensor`` or a plain ``ndarray``.  Plain arrays take a fast path that builds
no graph, which is what the samplers use at inference time.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from neural_mcmc.errors import ContractError, DimensionError


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_ufunc__ = None

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        # intermediate grads are rebuilt on every call; leaves accumulate
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic -------------------------------------------------------------

    def __add__(self, other):
        other = _lift(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor(self.data + other.data, _parents=(self, other), _backward=backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accumulate(-g)

        return Tensor(-self.data, _parents=(self,), _backward=backward)

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor(self.data * other.data, _parents=(self, other), _backward=backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        if not other.requires_grad:
            return self * (1.0 / other.data)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return _lift(other) * self ** -1.0

    def __pow__(self, exponent: float):
        exponent = float(exponent)

        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1.0))

        return Tensor(self.data**exponent, _parents=(self,), _backward=backward)

    def __matmul__(self, other):
        other = _lift(other)
        if self.data.ndim != 2 or other.data.ndim != 2 or self.shape[1] != other.shape[0]:
            raise DimensionError(f"matmul shapes {self.shape} @ {other.shape}")

        def backward(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return Tensor(self.data @ other.data, _parents=(self, other), _backward=backward)

    def __rmatmul__(self, other):
        return _lift(other) @ self

    def __getitem__(self, key):
        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            self._accumulate(full)

        return Tensor(self.data[key], _parents=(self,), _backward=backward)

    # reductions -------------------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False):
        def backward(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.shape))

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), _backward=backward)

    def mean(self, axis: int | None = None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    @property
    def T(self):
        def backward(g):
            self._accumulate(g.T)

        return Tensor(self.data.T, _parents=(self,), _backward=backward)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unary(x, fn, dfn):
    """Apply ``fn`` elementwise; ``dfn(x, y)`` is the local derivative."""
    if not isinstance(x, Tensor):
        return fn(np.asarray(x, dtype=np.float64))
    y = fn(x.data)

    def backward(g):
        x._accumulate(g * dfn(x.data, y))

    return Tensor(y, _parents=(x,), _backward=backward)


def exp(x):
    return _unary(x, np.exp, lambda _, y: y)


def log(x):
    return _unary(x, np.log, lambda a, _: 1.0 / a)


def tanh(x):
    return _unary(x, np.tanh, lambda _, y: 1.0 - y * y)


def relu(x):
    return _unary(x, lambda a: np.maximum(a, 0.0), lambda a, _: (a > 0).astype(np.float64))


def elu(x):
    return _unary(
        x,
        lambda a: np.where(a > 0, a, np.expm1(np.minimum(a, 0.0))),
        lambda a, y: np.where(a > 0, 1.0, y + 1.0),
    )


def square(x):
    return _unary(x, np.square, lambda a, _: 2.0 * a)


def identity(x):
    return x


def concat(parts: Sequence, axis: int = 1):
    """Concatenate along ``axis``; returns a Tensor if any part is one."""
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=axis)
    tensors = [_lift(p) for p in parts]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor(data, _parents=tuple(tensors), _backward=backward)


def value(x) -> np.ndarray:
    """Underlying array of a Tensor, or the array itself."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def parameters_grads(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


ACTIVATIONS: dict[str, Callable] = {
    "tanh": tanh,
    "relu": relu,
    "elu": elu,
    "linear": identity,
}
