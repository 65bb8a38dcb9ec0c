"""Minimal dense-tensor reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Every primitive records its inputs and a
backward rule on the implicit tape (creation order is the topological order);
backward() walks the reachable records once, newest first, accumulating
gradients into every requires_grad leaf.

Conventions:
  - only leaves created with requires_grad=True ever hold a .grad array
    (zero-initialized, so tensors not participating in a loss keep zero grad);
  - matmul/transpose operate on 2-D arrays, elementwise ops broadcast like
    numpy with gradients reduced back over broadcast axes;
  - inference code wraps calls in no_grad() to skip recording.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ParameterError, ShapeError

_grad_enabled = True
_node_counter = itertools.count()


class no_grad:
    """Context manager disabling tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_vjp", "_op", "_id")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._op = "leaf"
        self._id = next(_node_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def _tracks(self) -> bool:
        return self.requires_grad or self._parents != ()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; python scalars are wrapped as constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(values: np.ndarray, op: str, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(values)
    if _grad_enabled and any(p._tracks() for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    else:
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape of a broadcast input."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        values = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(values, "add", (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.values, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        values = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _make(values, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        values = a.values / b.values
    except ValueError:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        return (
            _unbroadcast(g / bv, a.shape),
            _unbroadcast(-g * av / (bv * bv), b.shape),
        )

    return _make(values, "div", (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, "matmul", (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    return _make(a.values.T.copy(), "transpose", (a,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ParameterError("concat of zero tensors")
    try:
        values = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(values, "concat", tensors, vjp)


def gather_rows(a, index: np.ndarray) -> Tensor:
    """out[i] = a[index[i]]; duplicate indices accumulate in the backward pass."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def vjp(g):
        acc = np.zeros(shape)
        np.add.at(acc, index, g)
        return (acc,)

    return _make(a.values[index], "gather_rows", (a,), vjp)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.values.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols: bad range [{start}, {stop}) for shape {a.shape}")
    shape = a.shape

    def vjp(g):
        acc = np.zeros(shape)
        acc[:, start:stop] = g
        return (acc,)

    return _make(a.values[:, start:stop].copy(), "slice_cols", (a,), vjp)


def segment_mean(a, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Mean of rows of a per segment id. Every segment must be non-empty."""
    a = as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError(f"segment_mean: expected 2-D, got {a.shape}")
    segment_ids = np.asarray(segment_ids, dtype=np.int64).reshape(-1)
    if segment_ids.shape[0] != a.shape[0]:
        raise ShapeError(
            f"segment_mean: {segment_ids.shape[0]} segment ids for {a.shape[0]} rows"
        )
    counts = np.bincount(segment_ids, minlength=num_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ParameterError("segment_mean: every segment must receive at least one row")
    sums = np.zeros((num_segments, a.shape[1]))
    np.add.at(sums, segment_ids, a.values)
    values = sums / counts[:, None]

    def vjp(g):
        return (g[segment_ids] / counts[segment_ids, None],)

    return _make(values, "segment_mean", (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0

    def vjp(g):
        return (g * mask,)

    return _make(a.values * mask, "relu", (a,), vjp)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic function on raw arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = sigmoid_np(a.values)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _make(s, "sigmoid", (a,), vjp)


def softmax(a, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along one axis; optionally restricted to mask==True entries.

    Masked entries get probability exactly 0 and receive zero gradient. A row
    with no allowed entry is a contract violation (callers provide fallbacks).
    """
    a = as_tensor(a)
    z = a.values
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} != logits shape {z.shape}")
        if not np.all(mask.any(axis=axis)):
            raise ContractError("softmax: a row has no allowed entries")
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - zmax)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _make(s, "softmax", (a,), vjp)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({n},), got {gain.shape} and {bias.shape}"
        )
    mu = a.values.mean(axis=-1, keepdims=True)
    var = a.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.values - mu) * inv
    values = xhat * gain.values + bias.values
    gv = gain.values

    def vjp(g):
        gx = g * gv
        dxhat_mean = gx.mean(axis=-1, keepdims=True)
        proj = (gx * xhat).mean(axis=-1, keepdims=True)
        da = inv * (gx - dxhat_mean - xhat * proj)
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        return da, dgain, dbias

    return _make(values, "layer_norm", (a, gain, bias), vjp)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values <= 0):
        raise ParameterError("log: values must be positive (clamp before calling)")
    av = a.values

    def vjp(g):
        return (g / av,)

    return _make(np.log(av), "log", (a,), vjp)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.values)

    def vjp(g):
        return (g * sign,)

    return _make(np.abs(a.values), "abs", (a,), vjp)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(a.values.sum(axis=axis), "sum", (a,), vjp)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    count = a.size if axis is None else shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, shape).copy(),)

    return _make(a.values.mean(axis=axis), "mean", (a,), vjp)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad leaf reachable from a scalar loss."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    # Collect the reachable subgraph; creation ids give a topological order.
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(node._parents)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.values)}
    for node in sorted(seen.values(), key=lambda t: t._id, reverse=True):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad += g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


def zero_grads(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.zero_grad()


def finite_difference_check(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-6,
    coords_per_tensor: int | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    f is a scalar-valued closure over `tensors`; the relative error of
    coordinate i is |g_analytic,i - g_fd,i| / max(1, |g_fd,i|). When
    coords_per_tensor is given, only that many evenly spaced coordinates of
    each tensor are probed.
    """
    if h <= 0:
        raise ParameterError("finite difference step h must be positive")
    tensors = list(tensors)
    for t in tensors:
        if not t.requires_grad:
            raise ContractError("finite_difference_check tensors must require grad")
        t.zero_grad()
    loss = f()
    backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    worst = 0.0
    with no_grad():
        for t, ga in zip(tensors, analytic):
            flat = t.values.reshape(-1)
            idx = range(flat.size)
            if coords_per_tensor is not None and flat.size > coords_per_tensor:
                idx = np.linspace(0, flat.size - 1, coords_per_tensor).astype(int)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = float(f().values)
                flat[i] = orig - h
                down = float(f().values)
                flat[i] = orig
                gfd = (up - down) / (2.0 * h)
                err = abs(ga.reshape(-1)[i] - gfd) / max(1.0, abs(gfd))
                worst = max(worst, err)
    return worst
