"""Dense tensors with reverse-mode automatic differentiation.

A `Tape` records every primitive executed while it is active; `backward`
replays the record in reverse execution order (a valid reverse topological
order, since every primitive creates fresh output tensors) and accumulates
gradients for all leaf tensors with ``requires_grad``.

Tensors are immutable once created by an operation. A tape is single-writer:
one forward/backward pass owns it; independent tapes may run on separate
threads (the active-tape stack is thread-local).
"""
from __future__ import annotations

import threading
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

from . import fftcore
from .errors import ContractError, NumericError

_DTYPES = {"single": np.float32, "double": np.float64}
_PRECISIONS = {np.dtype(np.float32): "single", np.dtype(np.float64): "double"}

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Tensor:
    """A dense row-major real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, precision: str | None = None, requires_grad: bool = False):
        arr = np.asarray(data)
        if precision is not None:
            if precision not in _DTYPES:
                raise ContractError(f"unknown precision {precision!r}")
            arr = arr.astype(_DTYPES[precision])
        elif arr.dtype not in _PRECISIONS:
            arr = arr.astype(np.float64)
        arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = object.__new__(cls)
        out.data = arr
        out.requires_grad = False
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self) -> str:
        return _PRECISIONS[self.data.dtype]

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        out = Tensor._wrap(self.data.copy())
        out.requires_grad = self.requires_grad
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, {self.precision}, grad={self.requires_grad})"

    # operator sugar; all routing through the module-level primitives
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Execution record of one forward pass."""

    def __init__(self):
        self._nodes: list[tuple[tuple[Tensor, ...], tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _STATE.stack.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _STATE.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_STATE = _State()


def _active() -> Tape | None:
    stack = _STATE.stack
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _record(outs: tuple[Tensor, ...], parents: tuple[Tensor, ...], backward_fn: Callable) -> None:
    tape = _active()
    if tape is None:
        return
    if not any(p.requires_grad for p in parents):
        return
    for out in outs:
        out.requires_grad = True
    tape._nodes.append((outs, parents, backward_fn))


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, Tensor]:
    """Reverse accumulation from a scalar loss over a recorded tape.

    Returns a map from every reached leaf tensor with ``requires_grad`` to its
    gradient. Leaves that do not influence the loss are absent (gradient zero).
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    produced: set[int] = set()
    for outs, _, _ in tape._nodes:
        produced.update(id(o) for o in outs)
    for outs, parents, fn in reversed(tape._nodes):
        gs = tuple(grads.pop(id(o), None) for o in outs)
        if all(g is None for g in gs):
            continue
        pgrads = fn(*gs)
        for parent, pg in zip(parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            holders[key] = parent
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {
        holders[key]: Tensor._wrap(np.ascontiguousarray(g))
        for key, g in grads.items()
        if key not in produced and holders[key].requires_grad
    }


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")
    return arr


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting allowed; gradients unbroadcast)

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._wrap(a.data + b.data)
    sa, sb = a.data.shape, b.data.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    _record((out,), (a, b), bw)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._wrap(a.data - b.data)
    sa, sb = a.data.shape, b.data.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    _record((out,), (a, b), bw)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._wrap(a.data * b.data)
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if need_a else None,
                _unbroadcast(g * ad, bd.shape) if need_b else None)

    _record((out,), (a, b), bw)
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor._wrap(_check_finite(a.data / b.data, "div"))
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    _record((out,), (a, b), bw)
    return out


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    out = Tensor._wrap(x.data * c)

    def bw(g):
        return (g * c,)

    _record((out,), (x,), bw)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractError("matmul expects 2-D operands")
    out = Tensor._wrap(a.data @ b.data)
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        return (g @ bd.T if need_a else None,
                ad.T @ g if need_b else None)

    _record((out,), (a, b), bw)
    return out


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    out = Tensor._wrap(np.reshape(x.data, shape))
    orig = x.data.shape

    def bw(g):
        return (np.reshape(g, orig),)

    _record((out,), (x,), bw)
    return out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    out = Tensor._wrap(np.ascontiguousarray(np.transpose(x.data, axes)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    _record((out,), (x,), bw)
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    x = _as_tensor(x)
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor._wrap(np.ascontiguousarray(x.data[index]))
    shape = x.data.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    _record((out,), (x,), bw)
    return out


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    _record((out,), tuple(parts), bw)
    return out


# ---------------------------------------------------------------------------
# reductions

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor._wrap(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)))
    shape = x.data.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    _record((out,), (x,), bw)
    return out


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor._wrap(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)))
    shape = x.data.shape
    n = x.data.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])
    inv = 1.0 / float(n)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g * inv, shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg * inv, shape),)

    _record((out,), (x,), bw)
    return out


# ---------------------------------------------------------------------------
# indexed access (token gather/scatter; all indices are constants of the pass)

def gather_rows(x: Tensor, idx: np.ndarray, *, unique: bool = False) -> Tensor:
    """Row gather; pass unique=True when idx has no repeats (faster adjoint)."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor._wrap(x.data[idx])
    shape = x.data.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if unique:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    _record((out,), (x,), bw)
    return out


def scatter_add_rows(values: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    values = _as_tensor(values)
    idx = np.asarray(idx, dtype=np.intp)
    shape = (n_rows,) + values.data.shape[1:]
    acc = np.zeros(shape, dtype=values.data.dtype)
    np.add.at(acc, idx, values.data)
    out = Tensor._wrap(acc)

    def bw(g):
        return (np.ascontiguousarray(g[idx]),)

    _record((out,), (values,), bw)
    return out


def take_per_row(x: Tensor, idx: np.ndarray, *, unique: bool = False) -> Tensor:
    """out[i, k] = x[i, idx[i, k]] for a 2-D tensor and per-row index array.

    unique=True promises the columns within each row do not repeat.
    """
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(x.data.shape[0])[:, None]
    out = Tensor._wrap(x.data[rows, idx])
    shape = x.data.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if unique:
            full[rows, idx] = g
        else:
            np.add.at(full, (rows, idx), g)
        return (full,)

    _record((out,), (x,), bw)
    return out


# ---------------------------------------------------------------------------
# spatial helpers for [B, C, H, W] feature maps

@lru_cache(maxsize=32)
def _unfold_index(h: int, w: int, kernel: int) -> np.ndarray:
    """Flat source index per (token, kernel offset), periodic wrap: [H*W, k*k]."""
    r = kernel // 2
    ys, xs = np.divmod(np.arange(h * w), w)
    idx = np.empty((h * w, kernel * kernel), dtype=np.intp)
    j = 0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            idx[:, j] = ((ys + dy) % h) * w + (xs + dx) % w
            j += 1
    return idx


def unfold_periodic(x: Tensor, kernel: int) -> Tensor:
    """im2col with periodic wrap: [B, C, H, W] -> [B, H*W, C*kernel^2].

    The last axis is ordered (channel, ky, kx) to match a conv kernel
    flattened by ``W.reshape(out_channels, -1)``. kernel must be odd.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ContractError("unfold_periodic expects [B, C, H, W]")
    if kernel % 2 != 1:
        raise ContractError("unfold_periodic needs an odd kernel")
    b, c, h, w = x.data.shape
    kk = kernel * kernel
    idx = _unfold_index(h, w, kernel)
    gathered = x.data.reshape(b, c, h * w)[:, :, idx]        # [B, C, HW, k*k]
    out = Tensor._wrap(gathered.transpose(0, 2, 1, 3).reshape(b, h * w, c * kk))

    def bw(g):
        # adjoint: source position p accumulates, for each kernel slot j, the
        # gradient of the token that read p there; that token sits at the
        # mirrored offset, i.e. idx[:, kk-1-j]
        g5 = g.reshape(b, h * w, c, kk).transpose(0, 2, 3, 1)   # [B, C, kk, HW]
        mirrored = idx[:, ::-1].T                                # [kk, HW]
        acc = g5[:, :, np.arange(kk)[:, None], mirrored].sum(axis=2)
        return (acc.reshape(b, c, h, w),)

    _record((out,), (x,), bw)
    return out


def space_to_patches(x: Tensor, patch: int) -> Tensor:
    """Non-overlapping patch extraction: [B, C, H, W] -> [B, Hp*Wp, C*P*P]."""
    x = _as_tensor(x)
    b, c, h, w = x.data.shape
    if h % patch or w % patch:
        raise ContractError(f"patch size {patch} does not divide grid {h}x{w}")
    hp, wp = h // patch, w // patch
    t = reshape(x, (b, c, hp, patch, wp, patch))
    t = transpose(t, (0, 2, 4, 1, 3, 5))
    return reshape(t, (b, hp * wp, c * patch * patch))


def patches_to_space(x: Tensor, patch: int, channels: int, hp: int, wp: int) -> Tensor:
    """Inverse of space_to_patches: [B, Hp*Wp, C*P*P] -> [B, C, H, W]."""
    x = _as_tensor(x)
    b = x.data.shape[0]
    t = reshape(x, (b, hp, wp, channels, patch, patch))
    t = transpose(t, (0, 3, 1, 4, 2, 5))
    return reshape(t, (b, channels, hp * patch, wp * patch))


# ---------------------------------------------------------------------------
# nonlinearities

def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor._wrap(np.maximum(x.data, 0))
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    _record((out,), (x,), bw)
    return out


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    out = Tensor._wrap(t)

    def bw(g):
        return (g * (1.0 - t * t),)

    _record((out,), (x,), bw)
    return out


def gelu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    phi = 0.5 * (1.0 + _erf(xd * _INV_SQRT2))
    out = Tensor._wrap(xd * phi)

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (phi + xd * pdf),)

    _record((out,), (x,), bw)
    return out


def texp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    e = _check_finite(np.exp(x.data), "exp")
    out = Tensor._wrap(e)

    def bw(g):
        return (g * e,)

    _record((out,), (x,), bw)
    return out


def tlog(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor._wrap(_check_finite(np.log(x.data), "log"))
    xd = x.data

    def bw(g):
        return (g / xd,)

    _record((out,), (x,), bw)
    return out


def tsqrt(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _check_finite(np.sqrt(x.data), "sqrt")
    out = Tensor._wrap(s)

    def bw(g):
        return (g * (0.5 / s),)

    _record((out,), (x,), bw)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._wrap(y)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    _record((out,), (x,), bw)
    return out


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "gelu": gelu,
    "relu": relu,
    "tanh": tanh,
    "identity": lambda x: x,
}


# ---------------------------------------------------------------------------
# 2D discrete Fourier transforms over the trailing two axes
#
# Convention: unnormalized forward, 1/(H*W) on the inverse. Gradients are the
# adjoint transforms with conjugation absorbed into the (real, imag) pair.

def dft2(x: Tensor) -> tuple[Tensor, Tensor]:
    """Forward DFT of a real field; returns the (real, imag) spectrum pair."""
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise ContractError("dft2 needs at least 2 dimensions")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("dft2 input contains non-finite values")
    spec = fftcore.dft2(x.data)
    re = Tensor._wrap(np.ascontiguousarray(spec.real))
    im = Tensor._wrap(np.ascontiguousarray(spec.imag))
    dtype = x.data.dtype

    def bw(g_re, g_im):
        if g_re is None:
            g_re = 0.0
        if g_im is None:
            g_im = 0.0
        # adjoint of the forward transform: unnormalized inverse-direction DFT
        grad = fftcore.dft2(g_re + 1j * np.asarray(g_im, dtype=np.result_type(dtype, np.complex64)), inverse=True)
        return (np.ascontiguousarray(grad.real.astype(dtype)),)

    _record((re, im), (x,), bw)
    return re, im


def idft2_real(re: Tensor, im: Tensor, *, strict: bool = True) -> Tensor:
    """Normalized inverse DFT of a spectrum pair, returning a real field.

    With strict=True the spectrum must be conjugate-symmetric: the imaginary
    residue is asserted below 1e-8 of the output norm before being discarded.
    With strict=False the real part is taken unconditionally (the layer
    contract inside the network, where nonlinearities break the symmetry).
    """
    re, im = _as_tensor(re), _as_tensor(im)
    if re.data.shape != im.data.shape:
        raise ContractError("real and imaginary parts must share a shape")
    h, w = re.data.shape[-2:]
    inv = fftcore.dft2(re.data + 1j * im.data, inverse=True) / (h * w)
    real = np.ascontiguousarray(inv.real.astype(re.data.dtype))
    if strict:
        resid = float(np.linalg.norm(inv.imag.ravel()))
        ref = float(np.linalg.norm(real.ravel()))
        if resid > 1e-8 * ref + 1e-30:
            raise NumericError(
                f"spectrum is not conjugate-symmetric: imaginary residue {resid:.3e} "
                f"exceeds 1e-8 x output norm {ref:.3e}"
            )
    out = Tensor._wrap(real)
    scale_ = 1.0 / (h * w)

    def bw(g):
        grad = fftcore.dft2(np.asarray(g), inverse=False) * scale_
        gre = np.ascontiguousarray(grad.real.astype(re.data.dtype))
        gim = np.ascontiguousarray(grad.imag.astype(im.data.dtype))
        return gre, gim

    _record((out,), (re, im), bw)
    return out
