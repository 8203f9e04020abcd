"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays in float32 (the training default) or float64 (used
throughout the gradient test-suite, where finite-difference tolerances are
unreachable in single precision). Primitives record onto the active tape;
``Tape.backward`` replays the records in reverse creation order, which is
automatically a reverse-topological order. Tapes are per-forward-pass and
freed after backward.

Binary operations require exactly matching shapes; the only broadcast
permitted is trailing-bias addition (``add_bias``). This rules out the usual
class of silent broadcasting bugs.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf, expit as _expit

from ._kernels import scatter_add_flat, scatter_add_rows


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ShapeError(ContractError):
    """Operand shapes are incompatible for the requested primitive."""


class FormatError(RuntimeError):
    """A binary file does not match its declared format."""


DEFAULT_DTYPE = np.float32
_FLOAT_TYPES = (np.float32, np.float64)

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """N-dimensional float array with optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_rec")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._rec = None  # tape this tensor was produced on, if any

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # never mutate an incoming gradient in place: it may be shared
        self.grad = g if self.grad is None else self.grad + g

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    __slots__ = ("_records", "_closed")

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._closed = False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Populate grads of every tensor reachable from ``loss``.

        Each record is visited exactly once, in reverse creation order;
        gradients of shared inputs accumulate additively. Intermediate
        gradients are freed as soon as their producing record has run, and
        the tape itself is cleared afterwards.
        """
        if self._closed:
            raise ContractError("tape already consumed by a previous backward")
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss._rec is not self:
            raise ContractError("loss was not produced on this tape")
        loss._accumulate(np.ones_like(loss.data))
        for out, backfn in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            backfn(g)
            if not out.requires_grad:
                out.grad = None
        self._records.clear()
        self._closed = True


_TAPE_STACK: list[Tape | None] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def tape():
    """Record primitives applied inside the block onto a fresh tape."""
    t = Tape()
    _TAPE_STACK.append(t)
    try:
        yield t
    finally:
        _TAPE_STACK.pop()


@contextmanager
def no_grad():
    """Disable recording inside the block (forward-only evaluation)."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def _live(t: Tensor, tp: Tape) -> bool:
    return t.requires_grad or t._rec is tp


def _emit(out: Tensor, inputs: Sequence[Tensor], backfn: Callable[[np.ndarray], None]) -> Tensor:
    tp = _active_tape()
    if tp is None or not any(_live(t, tp) for t in inputs):
        return out
    out._rec = tp
    tp._records.append((out, backfn))
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def const(data, dtype=None) -> Tensor:
    """Non-learnable tensor (no gradient is ever accumulated into it)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE, copy=True),
                  requires_grad=True)


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    tp = _active_tape()
    if tp is None:
        return out
    na, nb = _live(a, tp), _live(b, tp)
    if not (na or nb):
        return out

    def back(g):
        if na:
            a._accumulate(g)
        if nb:
            b._accumulate(g)

    return _emit(out, (a, b), back)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    tp = _active_tape()
    if tp is None:
        return out
    na, nb = _live(a, tp), _live(b, tp)
    if not (na or nb):
        return out

    def back(g):
        if na:
            a._accumulate(g)
        if nb:
            b._accumulate(-g)

    return _emit(out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _emit(out, (a,), lambda g: a._accumulate(-g))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    tp = _active_tape()
    if tp is None:
        return out
    na, nb = _live(a, tp), _live(b, tp)
    if not (na or nb):
        return out

    def back(g):
        if na:
            a._accumulate(g * b.data)
        if nb:
            b._accumulate(g * a.data)

    return _emit(out, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    out = Tensor(a.data / b.data)
    tp = _active_tape()
    if tp is None:
        return out
    na, nb = _live(a, tp), _live(b, tp)
    if not (na or nb):
        return out

    def back(g):
        if na:
            a._accumulate(g / b.data)
        if nb:
            b._accumulate(-g * out.data / b.data)

    return _emit(out, (a, b), back)


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data + a.data.dtype.type(s))
    return _emit(out, (a,), lambda g: a._accumulate(g))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    out = Tensor(a.data * s)
    return _emit(out, (a,), lambda g: a._accumulate(g * s))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast over the leading axes (trailing-bias rule)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    out = Tensor(x.data + b.data)
    tp = _active_tape()
    if tp is None:
        return out
    nx, nb = _live(x, tp), _live(b, tp)
    if not (nx or nb):
        return out

    def back(g):
        if nx:
            x._accumulate(g)
        if nb:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _emit(out, (x, b), back)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """x[..., K] @ w[K, N]."""
    if w.ndim != 2:
        raise ShapeError(f"matmul: weight must be 2-d, got {w.shape}")
    if x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"matmul: inner axes disagree, x last axis {x.shape[-1] if x.ndim else '?'}"
            f" vs w first axis {w.shape[0]}")
    k, n = w.shape
    lead = x.shape[:-1]
    x2d = x.data.reshape(-1, k)  # one large gemm beats numpy's stacked small gemms
    out = Tensor((x2d @ w.data).reshape(lead + (n,)))
    tp = _active_tape()
    if tp is None:
        return out
    nx, nw = _live(x, tp), _live(w, tp)
    if not (nx or nw):
        return out

    def back(g):
        g2d = g.reshape(-1, n)
        if nx:
            x._accumulate((g2d @ w.data.T).reshape(x.shape))
        if nw:
            w._accumulate(x2d.T @ g2d)

    return _emit(out, (x, w), back)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: a[..., M, K] @ b[..., K, N] with equal leading axes."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    tp = _active_tape()
    if tp is None:
        return out
    na, nb = _live(a, tp), _live(b, tp)
    if not (na or nb):
        return out

    def back(g):
        if na:
            a._accumulate(g @ b.data.swapaxes(-1, -2))
        if nb:
            b._accumulate(a.data.swapaxes(-1, -2) @ g)

    return _emit(out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b in one record, gradients to all three operands."""
    if w.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-d, got {w.shape}")
    if x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: inner axes disagree, x last axis "
                         f"{x.shape[-1] if x.ndim else '?'} vs w first axis {w.shape[0]}")
    if b.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError(f"linear: bias {b.shape} does not match weight columns {w.shape[1]}")
    k, n = w.shape
    lead = x.shape[:-1]
    x2d = x.data.reshape(-1, k)
    out = Tensor((x2d @ w.data + b.data).reshape(lead + (n,)))
    tp = _active_tape()
    if tp is None:
        return out
    nx, nw, nb = _live(x, tp), _live(w, tp), _live(b, tp)
    if not (nx or nw or nb):
        return out

    def back(g):
        g2d = g.reshape(-1, n)
        if nx:
            x._accumulate((g2d @ w.data.T).reshape(x.shape))
        if nw:
            w._accumulate(x2d.T @ g2d)
        if nb:
            b._accumulate(g2d.sum(axis=0))

    return _emit(out, (x, w, b), back)


# ---------------------------------------------------------------------------
# structural primitives
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _emit(out, (x,), lambda g: x._accumulate(g.reshape(x.shape)))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    return _emit(out, (x,), lambda g: x._accumulate(g.transpose(inv)))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ContractError("concat of zero tensors")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    tp = _active_tape()
    if tp is None:
        return out
    live = [_live(p, tp) for p in parts]
    if not any(live):
        return out
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for p, seg, lv in zip(parts, np.split(g, splits, axis=axis), live):
            if lv:
                p._accumulate(seg)

    return _emit(out, tuple(parts), back)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(np.ascontiguousarray(x.data[idx]))

    def back(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        x._accumulate(gx)

    return _emit(out, (x,), back)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))
    return _emit(out, (x,), lambda g: x._accumulate(np.broadcast_to(g, x.shape).astype(x.data.dtype)))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype))
    return _emit(out, (x,), lambda g: x._accumulate(np.broadcast_to(g / n, x.shape).astype(x.data.dtype)))


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=False))

    return _emit(out, (x,), back)


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = x.shape[axis]
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g / n, x.shape).astype(x.data.dtype, copy=False))

    return _emit(out, (x,), back)


def gather_tokens(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along the second-to-last axis: x[..., N, D] by idx[..., S]."""
    idx = np.asarray(idx)
    if idx.shape[:-1] != x.shape[:-2]:
        raise ShapeError(f"gather_tokens: index {idx.shape} does not match {x.shape}")
    out = Tensor(np.take_along_axis(x.data, idx[..., None], axis=-2))
    n, d = x.shape[-2], x.shape[-1]
    nbatch = int(np.prod(x.shape[:-2], dtype=np.int64)) if x.ndim > 2 else 1

    def back(g):
        gx = np.zeros_like(x.data).reshape(nbatch * n, d)
        offs = (np.arange(nbatch, dtype=np.int64) * n).reshape(idx.shape[:-1] + (1,))
        scatter_add_rows(gx, (idx + offs).ravel(), g.reshape(-1, d))
        x._accumulate(gx.reshape(x.shape))

    return _emit(out, (x,), back)


def scatter_tokens(base: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """Copy of base with rows at idx (unique per batch) replaced by ``rows``.

    Unreplaced rows keep the exact bit pattern of ``base``.
    """
    idx = np.asarray(idx)
    out_data = base.data.copy()
    np.put_along_axis(out_data, idx[..., None], rows.data, axis=-2)
    out = Tensor(out_data)
    tp = _active_tape()
    if tp is None:
        return out
    nb, nr = _live(base, tp), _live(rows, tp)
    if not (nb or nr):
        return out

    def back(g):
        if nr:
            rows._accumulate(np.take_along_axis(g, idx[..., None], axis=-2))
        if nb:
            gb = g.copy()
            np.put_along_axis(gb, idx[..., None], 0.0, axis=-2)
            base._accumulate(gb)

    return _emit(out, (base, rows), back)


def take_cols(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather x[B, n] columns by an integer map: out[B, *idx.shape] = x[:, idx]."""
    idx = np.asarray(idx)
    out = Tensor(x.data[:, idx])
    bsz, n = x.shape

    def back(g):
        gx = np.zeros_like(x.data).ravel()
        offs = (np.arange(bsz, dtype=np.int64) * n).reshape((bsz,) + (1,) * idx.ndim)
        scatter_add_flat(gx, (idx[None] + offs).ravel(), g)
        x._accumulate(gx.reshape(x.shape))

    return _emit(out, (x,), back)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    return _emit(out, (x,), lambda g: x._accumulate(g * (x.data > 0)))


def abs_(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data))
    return _emit(out, (x,), lambda g: x._accumulate(g * np.sign(x.data)))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y)
    return _emit(out, (x,), lambda g: x._accumulate(g * y))


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    return _emit(out, (x,), lambda g: x._accumulate(g / x.data))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    out = Tensor(y)
    return _emit(out, (x,), lambda g: x._accumulate(g * (0.5 / y)))


def sigmoid(x: Tensor) -> Tensor:
    y = _expit(x.data)
    out = Tensor(y)
    return _emit(out, (x,), lambda g: x._accumulate(g * (y * (1.0 - y))))


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    phi = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * phi)

    def back(g):
        dens = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        x._accumulate(g * (phi + x.data * dens))

    return _emit(out, (x,), back)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the subgradient goes to the first operand."""
    _check_same_shape(a, b, "maximum")
    out = Tensor(np.maximum(a.data, b.data))
    tp = _active_tape()
    if tp is None:
        return out
    na, nb = _live(a, tp), _live(b, tp)
    if not (na or nb):
        return out
    pick_a = a.data >= b.data

    def back(g):
        if na:
            a._accumulate(g * pick_a)
        if nb:
            b._accumulate(g * ~pick_a)

    return _emit(out, (a, b), back)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the subgradient goes to the first operand."""
    _check_same_shape(a, b, "minimum")
    out = Tensor(np.minimum(a.data, b.data))
    tp = _active_tape()
    if tp is None:
        return out
    na, nb = _live(a, tp), _live(b, tp)
    if not (na or nb):
        return out
    pick_a = a.data <= b.data

    def back(g):
        if na:
            a._accumulate(g * pick_a)
        if nb:
            b._accumulate(g * ~pick_a)

    return _emit(out, (a, b), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stabilized softmax along ``axis``; rows sum to one."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate((g - dot) * y)

    return _emit(out, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis followed by affine scale/shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    tp = _active_tape()
    if tp is None:
        return out
    nx, ng, nb = _live(x, tp), _live(gamma, tp), _live(beta, tp)
    if not (nx or ng or nb):
        return out

    def back(g):
        if ng:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if nb:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if nx:
            gh = g * gamma.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((gh - m1 - xhat * m2) * inv)

    return _emit(out, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def _pixel_coords(loc: np.ndarray, h: int, w: int):
    # cell-center convention: normalized u maps to pixel u*w - 0.5
    px = loc[..., 0] * w - 0.5
    py = loc[..., 1] * h - 0.5
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    return x0.astype(np.int64), y0.astype(np.int64), fx, fy


def bilinear_sample(value_map: Tensor, point: Tensor) -> Tensor:
    """Sample value_map[h, w, C] at one normalized (x, y) point.

    The kernel weight of an integer location a against sample position b is
    max(0, 1-|ax-bx|) * max(0, 1-|ay-by|); locations outside the grid
    contribute zero. Differentiable in both the map and the point.
    """
    if value_map.ndim != 3 or value_map.size == 0:
        raise ContractError(f"bilinear_sample: value map must be non-empty [h, w, C], got {value_map.shape}")
    if point.shape != (2,):
        raise ShapeError(f"bilinear_sample: point must have shape (2,), got {point.shape}")
    if not np.all(np.isfinite(point.data)):
        raise ContractError("bilinear_sample: point is not finite")
    h, w, c = value_map.shape
    x0, y0, fx, fy = _pixel_coords(point.data, h, w)
    xs = (int(x0), int(x0) + 1)
    ys = (int(y0), int(y0) + 1)
    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    acc = np.zeros(c, dtype=value_map.data.dtype)
    terms = []
    for iy, wyv in zip(ys, wy):
        for ix, wxv in zip(xs, wx):
            inside = 0 <= ix < w and 0 <= iy < h
            if inside:
                acc = acc + (wxv * wyv) * value_map.data[iy, ix]
            terms.append((iy, ix, inside))
    out = Tensor(acc)
    tp = _active_tape()
    if tp is None:
        return out
    nv, npnt = _live(value_map, tp), _live(point, tp)
    if not (nv or npnt):
        return out

    def back(g):
        if nv:
            gv = np.zeros_like(value_map.data)
            for (iy, ix, inside), wxv, wyv in zip(
                    terms, (wx[0], wx[1], wx[0], wx[1]), (wy[0], wy[0], wy[1], wy[1])):
                if inside:
                    gv[iy, ix] += (wxv * wyv) * g
            value_map._accumulate(gv)
        if npnt:
            dfx = 0.0
            dfy = 0.0
            dwx = (-1.0, 1.0)
            dwy = (-1.0, 1.0)
            k = 0
            for j, wyv in enumerate(wy):
                for i, wxv in enumerate(wx):
                    iy, ix, inside = terms[k]
                    k += 1
                    if not inside:
                        continue
                    vg = float(np.dot(value_map.data[iy, ix], g))
                    dfx += dwx[i] * wyv * vg
                    dfy += wxv * dwy[j] * vg
            point._accumulate(np.array([dfx * w, dfy * h], dtype=point.data.dtype))

    return _emit(out, (value_map, point), back)


def grid_sample(value: Tensor, loc: Tensor) -> Tensor:
    """Batched bilinear sampling: value[B, h, w, C] at loc[B, P, 2] (normalized).

    Out-of-grid corners contribute zero, matching ``bilinear_sample``.
    """
    if value.ndim != 4:
        raise ShapeError(f"grid_sample: value must be [B, h, w, C], got {value.shape}")
    if loc.ndim != 3 or loc.shape[-1] != 2 or loc.shape[0] != value.shape[0]:
        raise ShapeError(f"grid_sample: loc must be [B, P, 2] matching batch, got {loc.shape}")
    b, h, w, c = value.shape
    p = loc.shape[1]
    x0, y0, fx, fy = _pixel_coords(loc.data, h, w)
    x1 = x0 + 1
    y1 = y0 + 1
    # corner order: (x0,y0), (x1,y0), (x0,y1), (x1,y1)
    wgt = np.stack([(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy),
                    (1.0 - fx) * fy, fx * fy])                       # [4, B, P]
    cx = np.stack([x0, x1, x0, x1])
    cy = np.stack([y0, y0, y1, y1])
    mask = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
    boff = (np.arange(b, dtype=np.int64) * (h * w))[None, :, None]
    idx = boff + np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)   # [4, B, P]
    flat = value.data.reshape(b * h * w, c)
    mw = (wgt * mask).astype(value.data.dtype)
    gathered = [flat[idx[k]] for k in range(4)]                      # 4 x [B, P, C]
    acc = mw[0][..., None] * gathered[0]
    for k in range(1, 4):
        acc += mw[k][..., None] * gathered[k]
    out = Tensor(acc)
    tp = _active_tape()
    if tp is None:
        return out
    nv, nl = _live(value, tp), _live(loc, tp)
    if not (nv or nl):
        return out

    def back(g):
        if nv:
            gv = np.zeros((b * h * w, c), dtype=value.data.dtype)
            for k in range(4):
                scatter_add_rows(gv, idx[k].ravel(), (mw[k][..., None] * g).reshape(-1, c))
            value._accumulate(gv.reshape(value.shape))
        if nl:
            vg = [(gathered[k] * g).sum(axis=-1) * mask[k] for k in range(4)]
            # d(weight)/dfx per corner: -(1-fy), (1-fy), -fy, fy
            # d(weight)/dfy per corner: -(1-fx), -fx, (1-fx), fx
            gpx = (-(1.0 - fy) * vg[0] + (1.0 - fy) * vg[1] - fy * vg[2] + fy * vg[3]) * w
            gpy = (-(1.0 - fx) * vg[0] - fx * vg[1] + (1.0 - fx) * vg[2] + fx * vg[3]) * h
            loc._accumulate(np.stack([gpx, gpy], axis=-1).astype(loc.data.dtype, copy=False))

    return _emit(out, (value, loc), back)


# ---------------------------------------------------------------------------
# parameter checkpoint format
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"SDTR1"


def save_parameters(named: Iterable[tuple[str, Tensor]], path: str) -> None:
    """Write parameters as: magic, then per entry name/rank/dims/f32 data."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        for name, t in named:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", t.ndim))
            for d in t.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_parameters(path: str) -> dict[str, np.ndarray]:
    """Read a checkpoint back into {name: float32 array}, verifying length."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:5] != _CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:5]!r} at byte 0")
    pos = 5
    total = len(blob)

    def need(n: int, what: str):
        nonlocal pos
        if pos + n > total:
            raise FormatError(
                f"truncated checkpoint: need {pos + n} bytes for {what}, file has {total}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    params: dict[str, np.ndarray] = {}
    while pos < total:
        (nlen,) = struct.unpack("<I", need(4, "name length"))
        name = need(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", need(4, "rank"))
        dims = struct.unpack(f"<{rank}I", need(4 * rank, "dims")) if rank else ()
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(need(4 * count, f"data of {name}"), dtype="<f4")
        params[name] = data.reshape(dims).copy()
    if pos != total:
        raise FormatError(f"checkpoint has {total - pos} trailing bytes at offset {pos}")
    return params
