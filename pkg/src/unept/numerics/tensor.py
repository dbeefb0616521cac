"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation builds its output through :func:`record`, which
stores the parents and a closure mapping the output adjoint to parent adjoints.
:meth:`Tensor.backward` replays those closures in reverse execution order.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True
_counter = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
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


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = next(_counter)
        self.name = name

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
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- differentiation --------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        ``self`` must be a scalar unless an explicit output adjoint is given.
        Grads accumulate across calls; clear them with :meth:`zero_grad`.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE).reshape(self.shape)
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad and has no recorded history")

        adjoints = {id(self): grad}
        for node in _reverse_order(self):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        from .ops import matmul

        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _reverse_order(root: Tensor) -> list:
    """Recorded nodes reachable from ``root``, latest operation first.

    Creation order is a valid topological order of the graph, so sorting by
    the sequence stamp visits every node exactly once after all its consumers.
    """
    seen = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t._seq, reverse=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``backward(g)`` must return one adjoint (or None) per parent.
    """
    out = Tensor(np.asarray(data, dtype=DTYPE))
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return record(ad * bd, (a, b), backward)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return record(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


# -- reductions --------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- shape manipulation ------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (np.ndarray, list)) for i in parts)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return record(a.data[index], (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return record(np.stack([t.data for t in tensors], axis=axis), tensors, backward)
