"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Each op returns a new ``Tensor`` holding its inputs and a closure that maps
the output gradient to input gradients. ``Tensor.backward`` walks the graph
once in reverse topological order. Inside ``no_grad()`` nothing is recorded,
which is what inference and finite-difference probes use.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .. import kernels

_GRAD_ENABLED = True
# op names whose backward is deliberately scaled by 2 (fault-injection hook for verification)
_FAULTS: set[str] = set()


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def inject_fault(op: str):
    """Double the gradient flowing out of every ``op`` node while active."""
    _FAULTS.add(op)
    try:
        yield
    finally:
        _FAULTS.discard(op)


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("backward on a tensor that does not depend on any parameter (built under no_grad?)")
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def backward(root: Tensor, grad: np.ndarray) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=np.float64)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._op in _FAULTS:
            g = 2.0 * g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -----------------------------------------------------------------------------
# elementwise / structural ops
# -----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        k, n = bd.shape
        a2 = ad.reshape(-1, k)

        def bwd2(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make((a2 @ bd).reshape(ad.shape[:-1] + (n,)), (a, b), bwd2, "matmul")

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bwd, "matmul")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bwd, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def square(x: Tensor) -> Tensor:
    d = x.data
    return _make(d * d, (x,), lambda g: (2.0 * d * g,), "square")


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)
    return _make(r, (x,), lambda g: (g * 0.5 / r,), "sqrt")


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor) with a constant floor."""
    d = x.data
    keep = d >= floor
    return _make(np.where(keep, d, floor), (x,), lambda g: (g * keep,), "maximum")


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad / bd,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
        "divide",
    )


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([p.data for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


# -----------------------------------------------------------------------------
# indexing
# -----------------------------------------------------------------------------


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]``; idx may have any integer shape."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)].reshape(-1)[0]
        raise IndexError(f"embedding index {bad} out of range for table with {n} rows")
    d = table.shape[1]

    def bwd(g):
        out = np.zeros_like(table.data)
        kernels.scatter_add_rows(out, idx.reshape(-1), g.reshape(-1, d))
        return (out,)

    return _make(table.data[idx], (table,), bwd, "embedding")


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of a 2-D tensor ``x[idx]`` (idx 1-D)."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def bwd(g):
        out = np.zeros(shape)
        kernels.scatter_add_rows(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), bwd, "take_rows")


# -----------------------------------------------------------------------------
# fused neural-net ops
# -----------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    shape = x.shape
    d = shape[-1]
    x2 = x.data.reshape(-1, d)
    y, mu, rstd = kernels.layernorm_fwd(x2, gamma.data, beta.data, eps)

    def bwd(g):
        dx, dg, db = kernels.layernorm_bwd(g.reshape(-1, d), x2, mu, rstd, gamma.data)
        return dx.reshape(shape), dg, db

    return _make(y.reshape(shape), (x, gamma, beta), bwd, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    y, t = kernels.gelu_fwd(xd)
    return _make(y, (x,), lambda g: (kernels.gelu_bwd(xd, t, g),), "gelu")


def causal_softmax(s: Tensor) -> Tensor:
    """Softmax over the last axis of a (..., T, T) score tensor with future columns masked."""
    shape = s.shape
    t = shape[-1]
    p = kernels.causal_softmax_fwd(s.data.reshape(-1, t, t))

    def bwd(g):
        return (kernels.causal_softmax_bwd(p, g.reshape(-1, t, t)).reshape(shape),)

    return _make(p.reshape(shape), (s,), bwd, "causal_softmax")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain (non-differentiable) numerically stable softmax."""
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted sum over rows of -log softmax(logits)[target].

    Rows whose target is negative are ignored. With ``weights=None`` every
    valid row gets weight 1/(number of valid rows), i.e. the mean.
    """
    c = logits.shape[-1]
    z = logits.data.reshape(-1, c)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != z.shape[0]:
        raise ShapeError(f"cross_entropy: {z.shape[0]} logit rows vs {targets.shape[0]} targets")
    if np.any(targets >= c):
        raise IndexError(f"target {int(targets.max())} out of range for {c} classes")
    if weights is None:
        nvalid = max(int((targets >= 0).sum()), 1)
        weights = np.full(targets.shape[0], 1.0 / nvalid)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    loss, probs = kernels.xent_fwd(z, targets, weights)
    shape = logits.shape

    def bwd(g):
        return (kernels.xent_bwd(probs, targets, weights, float(g)).reshape(shape),)

    return _make(np.asarray(loss), (logits,), bwd, "cross_entropy")


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a single logit vector."""
    logits = as_tensor(logits)
    v = logits.shape[-1]
    if not 0 <= target < v:
        raise IndexError(f"target {target} out of range [0, {v})")
    return cross_entropy(reshape(logits, (1, v)), np.array([target]), np.array([1.0]))


def mse(a, b) -> Tensor:
    """Mean over all entries of the squared difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    return mean(square(sub(a, b)))


COS_EPS = 1e-8


def rowwise_cosine(a, b, eps: float = COS_EPS) -> Tensor:
    """Cosine similarity along the last axis: <a,b> / (max(|a|,eps) max(|b|,eps))."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na = np.linalg.norm(ad, axis=-1, keepdims=True)
    nb = np.linalg.norm(bd, axis=-1, keepdims=True)
    ca, cb = np.maximum(na, eps), np.maximum(nb, eps)
    dot = (ad * bd).sum(axis=-1, keepdims=True)
    out = dot / (ca * cb)

    def bwd(g):
        g = g[..., None]
        # the guard branch (norm < eps) is locally constant in the norm
        da = bd / (ca * cb) - np.where(na > eps, out * ad / (ca * ca), 0.0)
        db = ad / (ca * cb) - np.where(nb > eps, out * bd / (cb * cb), 0.0)
        return g * da, g * db

    return _make(out[..., 0], (a, b), bwd, "cosine")


def cosine_sim(a, b, eps: float = COS_EPS) -> Tensor:
    """Cosine similarity of two equally shaped tensors treated as flat vectors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine shape mismatch: {a.shape} vs {b.shape}")
    return rowwise_cosine(reshape(a, (1, -1)), reshape(b, (1, -1)), eps).reshape(())
