"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable function in this module builds its output with
:func:`_node`, which records the input tensors and a closure mapping the
output gradient to input gradients. :func:`backward` orders the recorded
graph topologically (a :class:`Tape`) and runs the closures once, in reverse.

Semantics worth knowing:

* Gradients accumulate additively into ``.grad`` across *different* losses;
  call :func:`zero_grad` between optimizer steps.
* A given loss can be backpropagated exactly once. A second call raises
  :class:`~ssan.errors.TapeConsumed`.
"""
from __future__ import annotations

import contextlib
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DetachedTensor,
    InvalidRate,
    NonFiniteValue,
    NotScalarLoss,
    ShapeMismatch,
    TapeConsumed,
)

DTYPE = np.float64
NEG_INF = np.finfo(DTYPE).min  # stand-in for -inf in masked softmax

_DEBUG = False


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every forward result for NaN/Inf while the context is active."""
    global _DEBUG
    previous, _DEBUG = _DEBUG, enabled
    try:
        yield
    finally:
        _DEBUG = previous


class Tensor:
    """A float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"non-finite values after op producing shape {data.shape}")
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    passes = x.data > 0
    return _node(np.where(passes, x.data, 0.0), (x,), lambda g: (g * passes,))


def where(cond: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """Keep ``x`` where ``cond`` holds, else the constant ``fill``; no gradient to the fill."""
    cond = np.asarray(cond, dtype=bool)
    try:
        out = np.where(cond, x.data, fill)
    except ValueError:
        raise ShapeMismatch(f"mask shape {cond.shape} vs tensor shape {x.shape}") from None
    return _node(out, (x,), lambda g: (unbroadcast(np.where(cond, g, 0.0), x.shape),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeMismatch(f"axis {a} out of range for rank {ndim}")
        out.append(int(a) % ndim)
    return tuple(out)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum_(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _node(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        shapes = [t.shape for t in tensors]
        raise ShapeMismatch(f"cannot concatenate shapes {shapes}: {err}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def index(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _node(np.array(out, dtype=DTYPE), (x,), backward)


def embed(table: Tensor, ids: np.ndarray, pad_id: int | None = 0) -> Tensor:
    """Row lookup ``table[ids]``; the padding row never receives gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatch(f"embedding table must be 2-D, got {table.shape}")

    def backward(g):
        grad = np.zeros_like(table.data)
        flat_ids = ids.reshape(-1)
        flat_g = g.reshape(-1, table.shape[1])
        if pad_id is not None:
            keep = flat_ids != pad_id
            flat_ids, flat_g = flat_ids[keep], flat_g[keep]
        np.add.at(grad, flat_ids, flat_g)
        return (grad,)

    return _node(table.data[ids], (table,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# normalisation, activation and regularisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _norm_axis(axis, x.ndim)
    with np.errstate(over="ignore"):
        shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _norm_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _node(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm over last extent {d} got gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=reduce_axes)
        g_bias = g.sum(axis=reduce_axes)
        dxhat = g * gain.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, g_gain, g_bias

    return _node(out, (x, gain, bias), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` so evaluation is the identity."""
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# relative-offset gather/scatter used by relative position attention


@lru_cache(maxsize=64)
def _one_hot(idx_bytes: bytes, shape: tuple[int, int], buckets: int) -> np.ndarray:
    idx = np.frombuffer(idx_bytes, dtype=np.int64).reshape(shape)
    hot = np.zeros(shape + (buckets,), dtype=DTYPE)
    rows, cols = np.indices(shape)
    hot[rows, cols, idx] = 1.0
    return hot


def _check_index(x: Tensor, idx: np.ndarray, buckets: int) -> np.ndarray:
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if idx.ndim != 2 or x.shape[-2] != idx.shape[0]:
        raise ShapeMismatch(f"index {idx.shape} incompatible with tensor {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= buckets):
        raise ShapeMismatch(f"index values out of range [0, {buckets})")
    return idx


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[..., i, j] = x[..., i, idx[i, j]]`` for ``x`` of shape ``[..., n, R]``."""
    buckets = x.shape[-1]
    idx = _check_index(x, idx, buckets)
    full = np.broadcast_to(idx, x.shape[:-2] + idx.shape)
    out = np.take_along_axis(x.data, full, axis=-1)
    hot = _one_hot(idx.tobytes(), idx.shape, buckets)
    return _node(out, (x,), lambda g: (np.einsum("...ij,ijr->...ir", g, hot),))


def scatter_last(x: Tensor, idx: np.ndarray, buckets: int) -> Tensor:
    """Adjoint of :func:`gather_last`: ``out[..., i, r] = sum_j x[..., i, j] * [idx[i, j] == r]``."""
    idx = _check_index(x, idx, buckets)
    if x.shape[-1] != idx.shape[1]:
        raise ShapeMismatch(f"index {idx.shape} incompatible with tensor {x.shape}")
    hot = _one_hot(idx.tobytes(), idx.shape, buckets)
    out = np.einsum("...ij,ijr->...ir", x.data, hot)

    def backward(g):
        full = np.broadcast_to(idx, g.shape[:-2] + idx.shape)
        return (np.take_along_axis(g, full, axis=-1),)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# differentiation


class Tape:
    """Topologically ordered record of the operations that produced a loss."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Accumulate ``d loss / d t`` into ``t.grad`` for every reachable ``requires_grad`` tensor."""
    if loss.size != 1:
        raise NotScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DetachedTensor("loss does not depend on any tensor that requires grad")
    if loss._consumed:
        raise TapeConsumed("backward already ran for this loss")
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    loss._consumed = True
    return tape


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
