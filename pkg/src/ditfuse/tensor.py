"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`; when any input tracks gradients the
output remembers its parents and a closure mapping the output gradient to
per-parent gradients. :func:`backward` walks that graph once in reverse
topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ditfuse import kernels
from ditfuse.kernels import EmptyRow  # noqa: F401


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class DetachedTensor(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """An op produced NaN/Inf from finite inputs."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out leading axes added by a trailing-axes broadcast."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead < 0 or grad.shape[lead:] != shape:
        raise ShapeMismatch(f"cannot reduce gradient {grad.shape} to {shape}")
    return grad.sum(axis=tuple(range(lead)))


def _check_trailing(a: np.ndarray, b: np.ndarray, op: str) -> None:
    # only equal shapes or a trailing-axes affine broadcast (bias / gain) are allowed
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if small.ndim and big.shape[big.ndim - small.ndim:] != small.shape:
        raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_trailing(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_trailing(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_trailing(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)  # a Python float keeps float32 data float32
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def silu(a: Tensor) -> Tensor:
    ad = a.data
    sig = 1.0 / (1.0 + np.exp(-ad))
    return _make(ad * sig, (a,), lambda g: (g * (sig * (1.0 + ad * (1.0 - sig))),), "silu")


# ---------------------------------------------------------------- reductions


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean")


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick rows of a (B, L, d) tensor: out[b, i] = x[b, index[b, i]]."""
    index = np.asarray(index, dtype=np.intp)
    b = np.arange(x.shape[0])[:, None]
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (b, index), g)
        return (full,)

    return _make(x.data[b, index], (x,), bw, "gather_rows")


def scatter_rows(src: Tensor, index: np.ndarray, length: int) -> Tensor:
    """Inverse of :func:`gather_rows`: place (B, n, d) rows into a zero (B, length, d) tensor.

    Indices within one batch row must be distinct.
    """
    index = np.asarray(index, dtype=np.intp)
    bsz, _, d = src.shape
    b = np.arange(bsz)[:, None]
    out = np.zeros((bsz, length, d), dtype=src.dtype)
    out[b, index] = src.data
    return _make(out, (src,), lambda g: (g[b, index],), "scatter_rows")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    shape, dtype = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), bw, "embedding")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s leading axes) or has the same
    leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if need_a else None
        if not need_b:
            gb = None
        elif bd.ndim == 2 and ad.ndim > 2:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layernorm params must be ({d},), got {gamma.shape}, {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw, "layernorm")


def softmax_masked(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` (True = visible).

    ``mask`` may omit leading axes or carry size-1 axes; it is broadcast to
    the score shape. Masked entries come out exactly zero.
    """
    n = scores.shape[-1]
    full = np.ascontiguousarray(np.broadcast_to(mask, scores.shape)).reshape(-1, n)
    flat = np.ascontiguousarray(scores.data.reshape(-1, n))
    y = kernels.masked_softmax_forward(flat, full)
    shape = scores.shape

    def bw(g):
        return (kernels.masked_softmax_backward(y, np.ascontiguousarray(g.reshape(-1, n))).reshape(shape),)

    return _make(y.reshape(shape), (scores,), bw, "softmax_masked")


# ---------------------------------------------------------------- graph traversal


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every gradient-tracking leaf reachable from ``root``.

    Gradients accumulate across calls; clear them with :func:`zero_grads`.
    """
    if root.data.size != 1 or root.ndim > 1:
        raise NotScalar(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise DetachedTensor("root does not depend on any gradient-tracking tensor")
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time."""
    base = np.array(x.data, dtype=np.float64 if x.dtype == np.float64 else x.dtype)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return out
