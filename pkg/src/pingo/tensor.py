"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records a closure that maps the output gradient to the
input gradients. ``Tensor.backward`` walks the recorded graph in reverse
topological order and frees it afterwards (first-order only).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "concat",
    "index_select",
    "segment_sum",
    "silu",
    "relu",
    "tanh",
    "sigmoid",
    "identity",
    "no_grad_data",
    "no_grad",
]

DTYPE = np.float64
_GRAD_ENABLED = True


class no_grad(contextlib.ContextDecorator):
    """Disable graph recording inside the block (evaluation only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def _shape_error(op: str, a: tuple, b: tuple) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    n_extra = grad.ndim - len(shape)
    if n_extra > 0:
        grad = grad.sum(axis=tuple(range(n_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """n-dimensional float64 array that participates in autodiff.

    Parameters
    ----------
    data : array_like
        Values; copied into a C-contiguous float64 buffer.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad``.
    name : str, optional
        Label used in error messages and checkpoints.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    # -- graph construction ------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def backward(self) -> None:
        """Populate ``grad`` of every ``requires_grad`` ancestor of this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward: root must be a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy() if node._backward is None else g
            else:
                node.grad = node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # free the graph as we go
            node._parents = ()
            node._backward = None

    # -- arithmetic ----------------------------------------------------------
    def _binary(self, other, op: str):
        other = as_tensor(other)
        try:
            np.broadcast_shapes(self.shape, other.shape)
        except ValueError:
            raise _shape_error(op, self.shape, other.shape) from None
        return other

    def __add__(self, other) -> "Tensor":
        other = self._binary(other, "add")
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._binary(other, "sub")
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._binary(other, "mul")
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._binary(other, "div")
        a, b = self.data, other.data
        return Tensor._make(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("pow: only scalar exponents are supported")
        a = self.data
        p = float(exponent)
        return Tensor._make(a**p, (self,), lambda g: (g * p * a ** (p - 1.0),))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise _shape_error("matmul", a.shape, b.shape)

        def backward(g):
            ga = g @ np.swapaxes(b, -1, -2)
            if a.ndim == 1:
                gb = np.outer(a, g)
            else:
                gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._make(a @ b, (self, other), backward)

    # -- reductions and shape ops ------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def square(self) -> "Tensor":
        a = self.data
        return Tensor._make(a * a, (self,), lambda g: (2.0 * a * g,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (0.5 * g / out,))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def norm(self, axis=-1, keepdims: bool = False) -> "Tensor":
        """Euclidean norm along ``axis``."""
        return self.square().sum(axis=axis, keepdims=keepdims).sqrt()

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise _shape_error("reshape", old, tuple(shape)) from None
        return Tensor._make(out, (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def broadcast_to(self, shape) -> "Tensor":
        old = self.shape
        try:
            out = np.broadcast_to(self.data, shape).copy()
        except ValueError:
            raise _shape_error("broadcast", old, tuple(shape)) from None
        return Tensor._make(out, (self,), lambda g: (_unbroadcast(g, old),))

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        basic = isinstance(idx, (int, slice)) or (
            isinstance(idx, tuple) and all(isinstance(i, (int, slice)) for i in idx)
        )

        def backward(g):
            out = np.zeros(shape, dtype=DTYPE)
            if basic:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(np.array(self.data[idx], dtype=DTYPE), (self,), backward)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def no_grad_data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; all other dimensions must agree."""
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            "concat: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)
        ) from None
    ax = axis % out.ndim
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return Tensor._make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=ax)))


def index_select(x: Tensor, index: np.ndarray, scatter=None) -> Tensor:
    """Gather rows ``x[index]`` along the first axis.

    ``scatter`` is an optional precomputed (rows x len(index)) incidence
    matrix used for the backward scatter-add instead of ``np.add.at``.
    """
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < -x.shape[0] or index.max() >= x.shape[0]):
        raise IndexError(f"index_select: index out of range for first axis of size {x.shape[0]}")
    shape = x.shape

    def backward(g):
        if scatter is not None:
            return (np.asarray(scatter @ g.reshape(g.shape[0], -1)).reshape(shape),)
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._make(x.data[index], (x,), backward)


def segment_sum(x: Tensor, segment_ids: np.ndarray, n_segments: int, matrix=None) -> Tensor:
    """Sum rows of ``x`` that share a segment id; empty segments are zero.

    ``matrix`` is an optional precomputed (n_segments x rows) incidence matrix.
    """
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    if segment_ids.shape[0] != x.shape[0]:
        raise _shape_error("segment_sum", x.shape, segment_ids.shape)
    if matrix is not None:
        out = np.asarray(matrix @ x.data.reshape(x.shape[0], -1)).reshape((n_segments,) + x.shape[1:])
    else:
        out = np.zeros((n_segments,) + x.shape[1:], dtype=DTYPE)
        np.add.at(out, segment_ids, x.data)
    return Tensor._make(out, (x,), lambda g: (g[segment_ids],))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # exp only ever sees non-positive arguments, so neither branch overflows
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(x: Tensor) -> Tensor:
    a = x.data
    s = _sigmoid(a)
    return Tensor._make(a * s, (x,), lambda g: (g * (s + a * s * (1.0 - s)),))


def relu(x: Tensor) -> Tensor:
    a = x.data
    mask = a > 0
    return Tensor._make(np.where(mask, a, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


def identity(x: Tensor) -> Tensor:
    return x
