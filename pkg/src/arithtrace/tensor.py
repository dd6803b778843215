"""Dense tensors with reverse-mode automatic differentiation.

Values are stored as float32 unless a tensor is built from float64 data, in
which case the whole graph stays in float64 (used by gradient checks).
Reductions (matmul inner products, layer-norm statistics, sums, losses) are
accumulated in float64 regardless of storage precision.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype) if np.isscalar(value) else value, dtype=like.dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _result_dtype(*tensors: Tensor):
    return np.result_type(*(t.dtype for t in tensors))


# --------------------------------------------------------------------------
# Backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = pg.astype(parent.dtype, copy=False)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --------------------------------------------------------------------------
# Core ops


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    # Only expansion over leading axes: one shape must be a suffix of the other.
    sa, sb = a.shape, b.shape
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out_dtype = _result_dtype(a, b)

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make((a.data + b.data).astype(out_dtype, copy=False), (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out_dtype = _result_dtype(a, b)

    def grad_fn(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make((a.data * b.data).astype(out_dtype, copy=False), (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _make((a.data * c).astype(a.dtype, copy=False), (a,), lambda g: (g * c,))


def _mm64(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.matmul(x.astype(np.float64, copy=False), y.astype(np.float64, copy=False))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or batched (..., m, k) @ (..., k, n) with equal batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ for {a.shape} and {b.shape}")
    if b.ndim > a.ndim:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_dtype = _result_dtype(a, b)

    def grad_fn(g):
        ga = _mm64(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = _mm64(a2.T, g.reshape(-1, g.shape[-1]))
        else:
            gb = _mm64(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(_mm64(a.data, b.data).astype(out_dtype), (a, b), grad_fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def slice_(a: Tensor, index) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[index]), (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])
    out_dtype = _result_dtype(*tensors)

    def grad_fn(g):
        return [
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        ]

    data = np.concatenate([t.data for t in tensors], axis=ax).astype(out_dtype, copy=False)
    return _make(data, tensors, grad_fn)


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(np.asarray(data), (a,), grad_fn)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data.astype(np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y64 = e / e.sum(axis=-1, keepdims=True)
    y = y64.astype(a.dtype)

    def grad_fn(g):
        g64 = g.astype(np.float64)
        return (y64 * (g64 - (g64 * y64).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), grad_fn)


LAYER_NORM_EPS = 1e-5


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply gain and bias."""
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match {a.shape}")
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_dtype = _result_dtype(a, gain, bias)
    y = (xhat * gain.data + bias.data).astype(out_dtype)

    def grad_fn(g):
        g64 = g.astype(np.float64)
        gx = g64 * gain.data
        n = x.shape[-1]
        da = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return da, (g64 * xhat).sum(axis=lead), g64.sum(axis=lead)

    return _make(y, (a, gain, bias), grad_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data.astype(np.float64)
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    y = (0.5 * x * (1.0 + t)).astype(a.dtype)

    def grad_fn(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return _make(y, (a,), grad_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")

    def grad_fn(g):
        gt = np.zeros(table.shape, dtype=np.float64)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), grad_fn)


def mask_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` (broadcastable, non-differentiable) is True."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)

    def grad_fn(g):
        return (np.where(mask, 0.0, g),)

    return _make(np.where(mask, a.dtype.type(value), a.data), (a,), grad_fn)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def mse_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target_data.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target_data.shape}")
    diff = pred.data.astype(np.float64) - target_data.astype(np.float64)
    value = np.asarray((diff * diff).mean()).astype(pred.dtype)
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def grad_fn(g):
        gp = 2.0 * diff * float(g) / diff.size
        return (gp, -gp) if len(parents) == 2 else (gp,)

    return _make(value, parents, grad_fn)


# --------------------------------------------------------------------------
# Parameters and gradient checking


class Parameter(Tensor):
    """Named leaf tensor registered for optimization."""

    __slots__ = ()

    def __init__(self, data, name: str, dtype=np.float32):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(
    function: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    epsilon: float = 1e-3,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``indices`` restricts the comparison to those flat element positions.
    The relative error of an element is |analytic - numeric| divided by
    max(|analytic|, |numeric|, 1e-8).
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, copy=True)
    x = Tensor(base.copy(), requires_grad=True)
    loss = function(x)
    backward(loss)
    analytic = np.zeros_like(base, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)

    flat = base.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(function(Tensor(base.copy())).data)
            flat[i] = orig - epsilon
            f_minus = float(function(Tensor(base.copy())).data)
            flat[i] = orig
            numeric = (np.float64(f_plus) - np.float64(f_minus)) / (2.0 * epsilon)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
