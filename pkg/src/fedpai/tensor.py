"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive expresses its backward rule in terms of the same
primitives, so ``grad(..., create_graph=True)`` returns gradients that are
themselves differentiable. Second-order quantities (Hessian-vector
products via a gradient-of-gradient pass) therefore come out of the same
machinery, which is what the gradient-flow pruning score needs.

The op set is deliberately small: enough for small MLP and stride-1
same-padded conv classifiers with softmax cross-entropy, nothing more.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import LayoutError

Array = np.ndarray

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 n-d array plus the op that produced it (when recording).

    ``data`` is the row-major value buffer, ``grad`` is filled by
    :meth:`backward` on leaves and always matches ``data`` in shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Tensor], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into leaf ``.grad`` slots."""
        leaves = [n for n in _toposort(self) if n._vjp is None]
        for leaf, g in zip(leaves, grad(self, leaves)):
            leaf.grad = g if leaf.grad is None else Tensor(leaf.grad.data + g.data)

    # arithmetic sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_const(other)))

    def __rsub__(self, other):
        return add(_const(other), neg(self))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce ``g`` back to ``shape`` by summing broadcast axes."""
    if g.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


def add(a, b) -> Tensor:
    a, b = _const(a), _const(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _const(a), _const(b)

    def vjp(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _make(a.data * b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = _const(a)

    def vjp(g):
        return (neg(g),)

    return _make(-a.data, (a,), vjp)


def div(a, b) -> Tensor:
    a, b = _const(a), _const(b)

    def vjp(g):
        ga = _unbroadcast(div(g, b), a.shape)
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise LayoutError(
            f"matmul expects 2-d operands, got {a.data.ndim}-d @ {b.data.ndim}-d"
        )

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make(a.data @ b.data, (a, b), vjp)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _const(a)
    if axes is None:
        axes = tuple(range(a.data.ndim))[::-1]
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _const(a)
    in_shape = a.shape

    def vjp(g):
        return (reshape(g, in_shape),)

    return _make(a.data.reshape(shape), (a,), vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _const(a)
    in_shape = a.shape
    ndim = a.data.ndim
    if axis is None:
        ax = tuple(range(ndim))
    elif isinstance(axis, int):
        ax = (axis % ndim,)
    else:
        ax = tuple(i % ndim for i in axis)

    def vjp(g):
        kd = list(in_shape)
        for i in ax:
            kd[i] = 1
        return (broadcast_to(reshape(g, tuple(kd)), in_shape),)

    return _make(np.sum(a.data, axis=ax, keepdims=keepdims), (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = _const(a)

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _make(np.broadcast_to(a.data, shape), (a,), vjp)


def exp(a) -> Tensor:
    a = _const(a)

    def vjp(g):
        return (mul(g, exp(a)),)

    return _make(np.exp(a.data), (a,), vjp)


def log(a) -> Tensor:
    a = _const(a)

    def vjp(g):
        return (div(g, a),)

    return _make(np.log(a.data), (a,), vjp)


def relu(a) -> Tensor:
    a = _const(a)
    gate = Tensor((a.data > 0).astype(np.float64))

    def vjp(g):
        return (mul(g, gate),)

    return _make(np.maximum(a.data, 0.0), (a,), vjp)


def slice1d(a, start: int, stop: int) -> Tensor:
    """Contiguous slice of a 1-d tensor; adjoint of :func:`embed1d`."""
    a = _const(a)
    n = a.data.shape[0]

    def vjp(g):
        return (embed1d(g, start, n),)

    return _make(a.data[start:stop], (a,), vjp)


def embed1d(a, start: int, length: int) -> Tensor:
    """Write a 1-d tensor into a zero vector of ``length`` at ``start``."""
    a = _const(a)
    k = a.data.shape[0]

    def vjp(g):
        return (slice1d(g, start, start + k),)

    out = np.zeros(length)
    out[start : start + k] = a.data
    return _make(out, (a,), vjp)


def take_cols(a, idx: Array) -> Tensor:
    """Gather ``a[:, idx]`` for 2-d ``a`` and integer ``idx`` of any shape."""
    a = _const(a)
    m = a.data.shape[1]

    def vjp(g):
        return (scatter_cols(g, idx, m),)

    return _make(a.data[:, idx], (a,), vjp)


def scatter_cols(a, idx: Array, num_cols: int) -> Tensor:
    """Adjoint of :func:`take_cols`: sum contributions back per column."""
    a = _const(a)

    def vjp(g):
        return (take_cols(g, idx),)

    b = a.data.shape[0]
    out = np.zeros((b, num_cols))
    np.add.at(out, (np.arange(b)[:, None, None], idx[None, :, :]), a.data)
    return _make(out, (a,), vjp)


def pad2d(a, p: int) -> Tensor:
    """Zero-pad the last two axes of a 4-d tensor by ``p`` on each side."""
    a = _const(a)
    if p == 0:
        return a

    def vjp(g):
        return (crop2d(g, p),)

    width = ((0, 0), (0, 0), (p, p), (p, p))
    return _make(np.pad(a.data, width), (a,), vjp)


def crop2d(a, p: int) -> Tensor:
    a = _const(a)
    if p == 0:
        return a

    def vjp(g):
        return (pad2d(g, p),)

    return _make(a.data[:, :, p:-p, p:-p], (a,), vjp)


def logsumexp(a, axis: int) -> Tensor:
    """Stable logsumexp with keepdims; the max shift is an exact identity
    for any constant, so treating it as non-differentiable is lossless."""
    a = _const(a)
    m = Tensor(np.max(a.data, axis=axis, keepdims=True))
    return add(log(tsum(exp(add(a, neg(m))), axis=axis, keepdims=True)), m)


def mean(a, axis=None) -> Tensor:
    a = _const(a)
    total = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / total)


def _toposort(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to ``inputs``.

    With ``create_graph=True`` the returned tensors carry their own
    history, so they can be differentiated again (double backward).
    Inputs unreachable from ``output`` get zero gradients.
    """
    if output.data.size != 1:
        raise LayoutError(f"grad expects a scalar output, got shape {output.shape}")
    order = _toposort(output)
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else add(acc, pg)
    return [
        grads[id(t)] if id(t) in grads else Tensor(np.zeros_like(t.data))
        for t in inputs
    ]
