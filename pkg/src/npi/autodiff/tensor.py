"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable op is a plain function returning a new :class:`Tensor`
that remembers its parents and a closure mapping the output gradient to the
parents' gradients. :func:`backward` rebuilds the execution order as a
:class:`Tape` and replays it in reverse.

Elementwise ops never broadcast; use :func:`add_bias` or :func:`mul_axis`
when a lower-rank operand is intended.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from npi.autodiff import kernels

DEFAULT_DTYPE = np.float32
BCE_EPS = 1e-7
LN_EPS = 1e-5
MASK_VALUE = -1e9


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from its inputs."""


class ContractError(RuntimeError):
    """A call violated an engine precondition."""


class DomainError(ValueError):
    """A value lies outside the op's mathematical domain."""


_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-d array with an optional gradient accumulator.

    Leaf tensors with ``requires_grad`` get a zero ``grad`` buffer up front;
    intermediate tensors never store gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data).astype(dtype or DEFAULT_DTYPE, copy=False)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
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

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced (shape {data.shape})")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    out.name = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        # freeze the decision now: a parent frozen at op time never receives grad
        out._parents = tuple(p if p.requires_grad else None for p in parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def elementwise(a, b, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., k] + b[k]."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match last dim of {x.shape}")

    def bw(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _make(x.data + b.data, (x, b), bw)


def mul_axis(x: Tensor, g_vec: Tensor, axis: int) -> Tensor:
    """Scale x along one axis by a vector (per-slice gain)."""
    axis = axis % x.data.ndim
    if g_vec.data.ndim != 1 or x.shape[axis] != g_vec.shape[0]:
        raise DimensionError(f"mul_axis: gain {g_vec.shape} does not match axis {axis} of {x.shape}")
    shape = [1] * x.data.ndim
    shape[axis] = -1
    gv = g_vec.data.reshape(shape)
    xd = x.data
    others = tuple(i for i in range(xd.ndim) if i != axis)

    def bw(g):
        return g * gv, (g * xd).sum(axis=others)

    return _make(xd * gv, (x, g_vec), bw)


def feature_affine(x: Tensor, shift: np.ndarray, scale_: np.ndarray) -> Tensor:
    """(x - shift) * scale along the last axis with constant vectors."""
    shift = np.asarray(shift, dtype=x.dtype)
    scale_ = np.asarray(scale_, dtype=x.dtype)
    if shift.shape != (x.shape[-1],) or scale_.shape != (x.shape[-1],):
        raise DimensionError("feature_affine: vectors must match the last axis")
    return _make((x.data - shift) * scale_, (x,), lambda g: (g * scale_,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supports [r,k]@[k,c], [...,r,k]@[k,c] (shared weight) and batched
    [...,r,k]@[...,k,c] with identical leading dims.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul: batch dims {ad.shape[:-2]} and {bd.shape[:-2]} differ")
    out = ad @ bd

    if bd.ndim == 2:

        def bw(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

    else:

        def bw(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(out, (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    axis = axis % xs[0].data.ndim
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        out = []
        for i in range(len(xs)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    for t in xs[1:]:
        _check_same(xs[0], t, "stack")
    n = len(xs)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([t.data for t in xs], axis=axis), xs, bw)


def pad_rows(x: Tensor, length: int, axis: int = -2) -> Tensor:
    """Zero-pad (at the end) or truncate one axis to a fixed length."""
    axis = axis % x.data.ndim
    n = x.shape[axis]
    if n == length:
        return x
    sl = [slice(None)] * x.data.ndim
    if n > length:
        sl[axis] = slice(0, length)
        return getitem(x, tuple(sl))
    pad = [(0, 0)] * x.data.ndim
    pad[axis] = (0, length - n)
    sl[axis] = slice(0, n)
    sl = tuple(sl)
    return _make(np.pad(x.data, pad), (x,), lambda g: (g[sl],))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup table[ids] with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError("embedding: id out of range")
    flat = ids.reshape(-1)
    d = table.shape[1]

    def bw(g):
        out = np.zeros_like(table.data)
        kernels.scatter_add_rows(out, flat, np.ascontiguousarray(g.reshape(-1, d)))
        return (out,)

    return _make(table.data[ids], (table,), bw)


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _make(np.asarray(x.data.sum(), dtype=dtype), (x,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean_all(x: Tensor) -> Tensor:
    shape, dtype, n = x.shape, x.dtype, x.size

    def bw(g):
        return (np.full(shape, g / n, dtype=dtype),)

    return _make(np.asarray(x.data.mean(), dtype=dtype), (x,), bw)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    shape = x.shape
    axis = axis % len(shape)
    return _make(x.data.sum(axis=axis), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # exp(-|x|) form is exact at 0 and never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return _make(y, (x,), lambda g: (g * y * (1 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1 - y * y),))


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    return _make(kernels.gelu_fwd(xd), (x,), lambda g: (kernels.gelu_bwd(g, xd),))


def activation(x: Tensor, kind: str) -> Tensor:
    fn = {"gelu": gelu, "relu": relu, "sigmoid": sigmoid, "tanh": tanh}.get(kind)
    if fn is None:
        raise ValueError(f"unknown activation {kind!r}")
    return fn(x)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    shape = x.shape
    d = shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},)")
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = kernels.layer_norm_fwd(x2, gain.data, bias.data, eps)
    gd = gain.data

    def bw(g):
        dx, dgain, dbias = kernels.layer_norm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gd)
        return dx.reshape(shape), dgain, dbias

    return _make(y.reshape(shape), (x, gain, bias), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shape = x.shape
    d = shape[-1]
    y = kernels.softmax_fwd(np.ascontiguousarray(x.data.reshape(-1, d)))

    def bw(g):
        return (kernels.softmax_bwd(np.ascontiguousarray(g.reshape(-1, d)), y).reshape(shape),)

    return _make(y.reshape(shape), (x,), bw)


def causal_mask(x: Tensor) -> Tensor:
    """Replace entries above the diagonal of the last two axes with a large negative."""
    n, m = x.shape[-2:]
    keep = np.tril(np.ones((n, m), dtype=bool))
    out = np.where(keep, x.data, x.dtype.type(MASK_VALUE))
    return _make(out, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# losses (mean-reduced; gradients flow to pred only)
# ---------------------------------------------------------------------------


def bce(pred: Tensor, target) -> Tensor:
    """Binary cross-entropy with inputs clamped to [eps, 1-eps]."""
    p = pred.data
    t = np.broadcast_to(np.asarray(target, dtype=p.dtype), p.shape)
    if np.any(p < -BCE_EPS) or np.any(p > 1 + BCE_EPS):
        raise DomainError("bce: prediction outside [0, 1]")
    if np.any(t < 0) or np.any(t > 1):
        raise DomainError("bce: target outside [0, 1]")
    eps = BCE_EPS
    pc = np.clip(p.astype(np.float64), eps, 1 - eps)
    loss = -(t * np.log(pc) + (1 - t) * np.log(1 - pc)).mean()
    n = p.size
    inside = (p >= eps) & (p <= 1 - eps)

    def bw(g):
        d = (-(t / pc) + (1 - t) / (1 - pc)) / n
        return ((g * d * inside).astype(p.dtype),)

    return _make(np.asarray(loss, dtype=p.dtype), (pred,), bw)


def bce_logits(logits: Tensor, target) -> Tensor:
    """BCE(sigmoid(z), t) evaluated stably from logits; no clamping, no dead gradient."""
    z = logits.data
    t = np.broadcast_to(np.asarray(target, dtype=z.dtype), z.shape)
    if np.any(t < 0) or np.any(t > 1):
        raise DomainError("bce_logits: target outside [0, 1]")
    z64 = z.astype(np.float64)
    loss = (np.maximum(z64, 0) - z64 * t + np.log1p(np.exp(-np.abs(z64)))).mean()
    n = z.size

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z64))
        return ((g * (sig - t) / n).astype(z.dtype),)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), bw)


def mse(pred: Tensor, target) -> Tensor:
    p = pred.data
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=p.dtype)
    if t.shape != p.shape:
        raise DimensionError(f"mse: shapes {p.shape} and {t.shape} differ")
    diff = p - t
    n = p.size
    return _make(np.asarray((diff * diff).mean(), dtype=p.dtype), (pred,), lambda g: (g * 2.0 * diff / n,))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy of [N, V] logits against integer targets."""
    x = logits.data
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != t.shape[0]:
        raise DimensionError(f"cross_entropy: logits {x.shape} vs targets {t.shape}")
    z = x - x.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(t.shape[0])
    n = t.shape[0]
    loss = (logsum - z[rows, t]).mean()

    def bw(g):
        p = np.exp(z - logsum[:, None])
        p[rows, t] -= 1
        return (g * p / n,)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), bw)


def loss(pred: Tensor, target, kind: str) -> Tensor:
    fn = {"bce": bce, "mse": mse, "cross_entropy": cross_entropy}.get(kind)
    if fn is None:
        raise ValueError(f"unknown loss {kind!r}")
    return fn(pred, target)


# ---------------------------------------------------------------------------
# tape + backward
# ---------------------------------------------------------------------------


class Tape:
    """The executed ops reachable from a root, in execution order."""

    def __init__(self, root: Tensor):
        seen = set()
        nodes = []
        stack_ = [root]
        while stack_:
            t = stack_.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack_.extend(p for p in t._parents if p is not None)
        nodes.sort(key=lambda t: t._seq)
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        grads = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or p is None:
                    continue
                if p._backward is None:
                    p.grad += pg.astype(p.grad.dtype, copy=False)
                elif id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    def clear(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes = []


def backward(loss_: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``; consumes the graph."""
    if loss_.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss_.shape}")
    if not loss_.requires_grad:
        raise ContractError("loss is not connected to any tensor requiring grad")
    if loss_._backward is None:
        loss_.grad += 1
        return
    tape = Tape(loss_)
    tape.replay(loss_, np.ones(loss_.shape, dtype=loss_.dtype))
    tape.clear()


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
