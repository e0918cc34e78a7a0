"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float64 ndarray and remembers, per operation, the
vector-Jacobian products needed to push a scalar loss gradient back to
every reachable ``Param``. The graph is built eagerly during the forward
pass and replayed once in reverse topological order by ``backward``.

Gradients of broadcast operands are sum-reduced back to the operand
shape, so the usual numpy broadcasting rules apply throughout.
"""

from __future__ import annotations

import zlib
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Param",
    "as_tensor",
    "no_grad",
    "grad_enabled",
    "make_rng",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "stack",
    "tsum",
    "tmean",
    "exp",
    "log",
    "sqrt",
    "square",
    "tanh",
    "sigmoid",
    "relu",
    "elu",
    "softplus",
    "maximum",
    "diagonal",
    "matrix_inverse",
    "logdet",
]

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the context (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce ``grad`` over axes that were broadcast up from ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


_NODE_COUNTER = 0


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_edges", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        global _NODE_COUNTER
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        # (parent, vjp) pairs; populated only for non-leaf gradient nodes.
        self._edges: tuple = ()
        _NODE_COUNTER += 1
        self._seq = _NODE_COUNTER

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        Only valid on scalar results of a forward pass; calling it on a
        detached or non-scalar tensor is an error. Nodes are replayed in
        decreasing creation order, which is a topological order because
        operations only consume already-constructed tensors.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor with no gradient graph")
        reachable = []
        seen = {id(self)}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._edges:
                reachable.append(node)
                for parent, _ in node._edges:
                    if id(parent) not in seen:
                        seen.add(id(parent))
                        stack.append(parent)
        reachable.sort(key=lambda n: n._seq, reverse=True)
        self.grad = np.ones_like(self.data)
        for node in reachable:
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._edges:
                pg = vjp(g)
                parent.grad = pg if parent.grad is None else parent.grad + pg
            # Interior nodes are not reused after the sweep; free memory.
            node.grad = None

    # Operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


class Param(Tensor):
    """Leaf tensor holding a learnable value and its accumulated gradient."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Param({self.name}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], vjps: Sequence) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED:
        edges = tuple(
            (p, v) for p, v in zip(parents, vjps) if p.requires_grad
        )
        if edges:
            out.requires_grad = True
            out._edges = edges
    return out


# Elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        (
            lambda g, sa=a.data.shape: _unbroadcast(g, sa),
            lambda g, sb=b.data.shape: _unbroadcast(g, sb),
        ),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        (
            lambda g, sa=a.data.shape: _unbroadcast(g, sa),
            lambda g, sb=b.data.shape: _unbroadcast(-g, sb),
        ),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        (
            lambda g, bd=b.data, sa=a.data.shape: _unbroadcast(g * bd, sa),
            lambda g, ad=a.data, sb=b.data.shape: _unbroadcast(g * ad, sb),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        (
            lambda g, bd=b.data, sa=a.data.shape: _unbroadcast(g / bd, sa),
            lambda g, o=out, bd=b.data, sb=b.data.shape: _unbroadcast(
                -g * o / bd, sb
            ),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), (lambda g: -g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _result(
        a.data**p,
        (a,),
        (lambda g, ad=a.data: g * p * ad ** (p - 1),),
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), (lambda g, ad=a.data: g * 2.0 * ad,))


# Linear algebra -----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    return _result(
        a.data @ b.data,
        (a, b),
        (
            lambda g, bd=b.data, sa=a.data.shape: _unbroadcast(
                g @ bd.swapaxes(-1, -2), sa
            ),
            lambda g, ad=a.data, sb=b.data.shape: _unbroadcast(
                ad.swapaxes(-1, -2) @ g, sb
            ),
        ),
    )


def transpose(a) -> Tensor:
    """Swap the two trailing axes."""
    a = as_tensor(a)
    return _result(
        a.data.swapaxes(-1, -2), (a,), (lambda g: g.swapaxes(-1, -2),)
    )


def transpose_axes(a, axes: tuple[int, ...]) -> Tensor:
    """General axis permutation."""
    a = as_tensor(a)
    inv = tuple(int(i) for i in np.argsort(axes))
    return _result(
        a.data.transpose(axes), (a,), (lambda g: g.transpose(inv),)
    )


def matrix_inverse(a) -> Tensor:
    """Batched matrix inverse; d(inv) = -inv^T g inv^T."""
    a = as_tensor(a)
    inv = np.linalg.inv(a.data)
    return _result(
        inv,
        (a,),
        (
            lambda g, iv=inv: -(
                iv.swapaxes(-1, -2) @ g @ iv.swapaxes(-1, -2)
            ),
        ),
    )


def logdet(a) -> Tensor:
    """log det of (batched) positive-definite matrices; grad is inv(a)^T."""
    a = as_tensor(a)
    sign, val = np.linalg.slogdet(a.data)
    if np.any(sign <= 0):
        raise np.linalg.LinAlgError("logdet requires positive determinant")
    inv = np.linalg.inv(a.data)
    return _result(
        val,
        (a,),
        (lambda g, iv=inv: g[..., None, None] * iv.swapaxes(-1, -2),),
    )


def diagonal(a) -> Tensor:
    """Diagonal of the two trailing axes, shape (..., d)."""
    a = as_tensor(a)

    def vjp(g, shape=a.data.shape):
        out = np.zeros(shape)
        idx = np.arange(shape[-1])
        out[..., idx, idx] = g
        return out

    return _result(np.diagonal(a.data, axis1=-2, axis2=-1).copy(), (a,), (vjp,))


# Shape manipulation -------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(
        a.data.reshape(shape),
        (a,),
        (lambda g, s=a.data.shape: g.reshape(s),),
    )


def index(a, idx) -> Tensor:
    """Basic (slice/int) indexing; gradient scatters into a zero tensor."""
    a = as_tensor(a)

    def vjp(g, shape=a.data.shape, idx=idx):
        out = np.zeros(shape)
        out[idx] = g
        return out

    return _result(a.data[idx], (a,), (vjp,))


def concat(parts: Iterable, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = bounds[i], bounds[i + 1]

        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    return _result(
        np.concatenate([p.data for p in parts], axis=axis),
        parts,
        tuple(make_vjp(i) for i in range(len(parts))),
    )


def stack(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]

    def make_vjp(i):
        def vjp(g):
            return np.take(g, i, axis=axis)

        return vjp

    return _result(
        np.stack([p.data for p in parts], axis=axis),
        parts,
        tuple(make_vjp(i) for i in range(len(parts))),
    )


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def vjp(g, shape=a.data.shape, axis=axis, keepdims=keepdims):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), (vjp,))


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# Nonlinearities -----------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), (lambda g, o=out: g * o,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), (lambda g, ad=a.data: g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), (lambda g, o=out: g * 0.5 / o,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), (lambda g, o=out: g * (1.0 - o * o),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # Stable logistic for both signs of the argument.
    z = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _result(out, (a,), (lambda g, o=out: g * o * (1.0 - o),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), (lambda g, m=mask: g * m,))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    neg_part = alpha * (np.exp(np.minimum(a.data, 0.0)) - 1.0)
    out = np.where(a.data > 0, a.data, neg_part)
    deriv = np.where(a.data > 0, 1.0, neg_part + alpha)
    return _result(out, (a,), (lambda g, d=deriv: g * d,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    return _result(out, (a,), (lambda g, s=sig: g * s,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    return _result(
        np.maximum(a.data, b.data),
        (a, b),
        (
            lambda g, m=take_a, sa=a.data.shape: _unbroadcast(g * m, sa),
            lambda g, m=take_a, sb=b.data.shape: _unbroadcast(g * ~m, sb),
        ),
    )


# RNG streams --------------------------------------------------------


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode())
    return int(key)


def make_rng(root_seed: int, *keys) -> np.random.Generator:
    """Derive an independent generator from a root seed and stream keys.

    Streams are decoupled through ``SeedSequence`` entropy lists, so any
    component can own its own randomness while the whole run stays
    reproducible from one seed. String keys hash stably across runs.
    """
    entropy = [int(root_seed)] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
