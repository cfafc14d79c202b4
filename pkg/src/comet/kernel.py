"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the encoder, the contrastive losses and the
classifier heads need are provided.  Every op computes its forward value
with vectorized numpy and, when a :class:`GradTape` is active and at
least one input is tracked, appends a record holding a vector-Jacobian
product closure.  :func:`backward` walks the records in reverse.

Example::

    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = sum_(linear(x, w, b))
    grads = backward(tape, loss)
    grads[w]
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

from . import _fast

from .errors import (
    ContractError,
    DimensionError,
    EmptyInputError,
    NumericError,
    ParameterError,
)

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense row-major array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name}: " if self.name else ""
        return f"Tensor({label}shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class _Record:
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class GradTape:
    """Ordered record of executed ops.

    Use as a context manager; ops executed inside the block are recorded
    when any input is tracked.  A tape belongs to one training step and
    must not be shared between threads.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> "GradMap":
        return backward(self, loss)


_ACTIVE: list[GradTape] = []


class GradMap(dict):
    """Gradients keyed by the tracked leaf tensors they belong to."""

    def __getitem__(self, key: Tensor) -> np.ndarray:
        return dict.__getitem__(self, id(key))

    def __contains__(self, key) -> bool:
        return dict.__contains__(self, id(key))

    def get(self, key, default=None):
        return dict.get(self, id(key), default)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    out = Tensor(data)
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _ACTIVE[-1].records.append(_Record(out, parents, vjp, op))
    return out


def backward(tape: GradTape, loss: Tensor) -> GradMap:
    """Propagate d(loss)/d(.) to every tracked leaf recorded on ``tape``.

    Fan-out is handled by summing contributions.  Leaves that take part in
    the recorded graph but do not influence ``loss`` receive zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(r.out) for r in tape.records}
    if id(loss) not in produced:
        raise ContractError("loss was not produced on this tape")

    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = acc.pop(id(rec.out), None)
        if g is None:
            continue
        for parent, pg in zip(rec.parents, rec.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = acc.get(key)
            acc[key] = pg if prev is None else prev + pg

    grads = GradMap()
    for rec in tape.records:
        for parent in rec.parents:
            key = id(parent)
            if parent.requires_grad and key not in produced and key not in grads:
                g = acc.get(key)
                dict.__setitem__(grads, key, np.zeros_like(parent.data) if g is None else g)
    return grads


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    """``a + b`` for equal shapes, or a tensor plus a constant."""
    a = as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    c = np.asarray(b, dtype=a.dtype)
    out = a.data + c
    if out.shape != a.shape:
        raise DimensionError(f"add: constant of shape {c.shape} would broadcast {a.shape}")
    return _result(out, (a,), lambda g: (g,), "add_const")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shaped tensors, or scaling by a constant."""
    a = as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
        ad, bd = a.data, b.data
        return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    c = np.asarray(b, dtype=a.dtype)
    try:
        shape = np.broadcast_shapes(a.shape, c.shape)
    except ValueError:
        shape = None
    if shape != a.shape:
        raise DimensionError(f"mul: constant of shape {c.shape} does not fit {a.shape}")
    out = a.data * c
    return _result(out, (a,), lambda g: (g * c,), "mul_const")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), vjp, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis), 1.0 / float(n))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp, "concat")


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b^T`` over the last two axes: [..,M,K] x [..,N,K] -> [..,M,N]."""
    if a.shape[-1] != b.shape[-1] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul_nt: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd, np.swapaxes(g, -1, -2) @ ad

    return _result(ad @ np.swapaxes(bd, -1, -2), (a, b), vjp, "matmul_nt")


# ---------------------------------------------------------------------------
# network layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` applied over the trailing axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, vjp, "linear")


def conv1d_dilated(x: Tensor, w: Tensor, b: Tensor | None, dilation: int) -> Tensor:
    """Same-padded, kernel-3 dilated convolution over time.

    ``x`` is [B,T,C_in], ``w`` is [C_out,C_in,3]; tap ``j`` reads the input
    at ``t + (j-1)*dilation`` and zero outside ``[0, T)``.
    """
    if int(dilation) != dilation or dilation <= 0:
        raise ParameterError(f"dilation must be a positive integer, got {dilation!r}")
    d = int(dilation)
    if x.ndim != 3 or w.ndim != 3 or w.shape[2] != 3 or w.shape[1] != x.shape[2]:
        raise DimensionError(f"conv1d_dilated: input {x.shape} does not match kernel {w.shape}")
    c_out, c_in, _ = w.shape
    if b is not None and b.shape != (c_out,):
        raise DimensionError(f"conv1d_dilated: bias {b.shape} does not match kernel {w.shape}")
    B, T, _ = x.shape
    xd = x.data
    # wcat[c, j, o] = w[o, c, j]; one GEMM produces all three taps
    wcat = np.ascontiguousarray(w.data.transpose(1, 2, 0)).reshape(c_in, 3 * c_out)
    y = (xd.reshape(B * T, c_in) @ wcat).reshape(B, T, 3, c_out)
    bias = b.data if b is not None else np.zeros(c_out, dtype=y.dtype)
    out = _fast.tap_sum(y, d, bias.astype(y.dtype, copy=False))

    def vjp(g):
        gy2 = _fast.tap_stack(np.ascontiguousarray(g), d).reshape(B * T, 3 * c_out)
        gx = (gy2 @ wcat.T).reshape(B, T, c_in)
        gw = (gy2.T @ xd.reshape(B * T, c_in)).reshape(3, c_out, c_in).transpose(1, 2, 0)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1))

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, vjp, "conv1d_dilated")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the normal CDF from erf.

    float32 inputs go through a vectorized rational erf accurate to float32
    rounding; float64 uses scipy's ``ndtr``.
    """
    xd = x.data
    if xd.dtype == np.float32:
        out, deriv = _fast.gelu_f32(xd)

        def vjp(g):
            return (g * deriv,)

        return _result(out, (x,), vjp, "gelu")

    cdf = special.ndtr(xd)

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _result(xd * cdf, (x,), vjp, "gelu")


def max_pool_time(x: Tensor) -> Tensor:
    """[B,T,C] -> [B,C], maximum over the time axis (first index wins ties)."""
    if x.ndim != 3:
        raise DimensionError(f"max_pool_time expects [B,T,C], got {x.shape}")
    T = x.shape[1]
    if T == 0:
        raise EmptyInputError("max_pool_time over an empty time axis")
    out, idx = _fast.max_over_time(np.ascontiguousarray(x.data))

    def vjp(g):
        return (_fast.scatter_over_time(np.ascontiguousarray(g), idx, T),)

    return _result(out, (x,), vjp, "max_pool_time")


def max_pool_time_stride2(x: Tensor) -> Tensor:
    """[B,T,C] -> [B,ceil(T/2),C], max over disjoint pairs of timestamps.

    The earlier timestamp of a pair wins ties; an odd trailing timestamp is
    passed through unchanged.
    """
    if x.ndim != 3:
        raise DimensionError(f"max_pool_time_stride2 expects [B,T,C], got {x.shape}")
    B, T, C = x.shape
    if T == 0:
        raise EmptyInputError("max_pool_time_stride2 over an empty time axis")
    out, src = _fast.pair_max(np.ascontiguousarray(x.data))

    def vjp(g):
        return (_fast.pair_scatter(np.ascontiguousarray(g), src, T),)

    return _result(out, (x,), vjp, "max_pool_time_stride2")


def logsumexp(x: Tensor, axis: int = -1, where: np.ndarray | None = None) -> Tensor:
    """Stabilized ``log(sum(exp(x)))`` along ``axis``.

    With a boolean ``where`` mask only selected entries take part.  A slice
    with nothing selected yields 0 and receives no gradient.
    """
    xd = x.data
    if where is None:
        sel = None
        masked = xd
    else:
        sel = np.broadcast_to(np.asarray(where, dtype=bool), xd.shape)
        masked = np.where(sel, xd, -np.inf)
    m = np.max(masked, axis=axis, keepdims=True)
    empty = ~np.isfinite(m)
    m = np.where(empty, 0.0, m)
    e = np.exp(masked - m)
    s = e.sum(axis=axis, keepdims=True)
    s_safe = np.where(empty, 1.0, s)
    out = np.where(empty, 0.0, m + np.log(s_safe))

    def vjp(g):
        soft = e / s_safe
        return (np.expand_dims(g, axis) * soft,)

    return _result(np.squeeze(out, axis=axis).astype(xd.dtype, copy=False), (x,), vjp, "logsumexp")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Rows of ``x`` divided by ``max(||row||, eps)`` along the last axis."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = xd / denom
    clipped = norm <= eps

    def vjp(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        gx = np.where(clipped, g / denom, (g - y * proj) / denom)
        return (gx,)

    return _result(y, (x,), vjp, "l2_normalize")


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    ``f`` re-evaluates the scalar objective from the current contents of
    ``params`` (which are perturbed in place and restored).  The error per
    coordinate is ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ParameterError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    for p in params:
        if p.dtype != np.float64:
            raise ParameterError("grad_check requires 64-bit parameters")
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True

    with GradTape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("objective is not finite at the base point")
    grads = backward(tape, loss)

    def value() -> float:
        v = float(f().data)
        if not math.isfinite(v):
            raise NumericError("objective became non-finite under perturbation")
        return v

    worst = 0.0
    for p in params:
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        ga = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(ga[i] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst
