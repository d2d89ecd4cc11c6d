"""Batched complex DFTs: radix-2 for power-of-two extents, matrix fallback otherwise.

All transforms here are unnormalized in both directions; callers apply the
1/(H*W) factor on the inverse. Arrays are transformed along their trailing
axes with leading axes treated as batch dimensions.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=64)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


@lru_cache(maxsize=128)
def _twiddles(m: int, sign: int) -> np.ndarray:
    # e^{sign * 2*pi*i * k / m} for k < m/2
    return np.exp(sign * 2j * np.pi * np.arange(m // 2) / m)


@lru_cache(maxsize=64)
def _dft_matrix(n: int, sign: int) -> np.ndarray:
    jk = np.outer(np.arange(n), np.arange(n))
    return np.exp(sign * 2j * np.pi * jk / n)


def _fft_pow2_last(a: np.ndarray, sign: int) -> np.ndarray:
    n = a.shape[-1]
    out = a[..., _bit_reversal(n)]
    m = 2
    while m <= n:
        half = m // 2
        w = _twiddles(m, sign).astype(out.dtype, copy=False)
        shaped = out.reshape(a.shape[:-1] + (n // m, m))
        even = shaped[..., :half]
        odd = shaped[..., half:] * w
        out = np.concatenate([even + odd, even - odd], axis=-1)
        out = out.reshape(a.shape)
        m *= 2
    return out


def dft_last(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalized DFT along the last axis of a complex array."""
    a = np.asarray(a)
    if not np.iscomplexobj(a):
        a = a.astype(np.complex128 if a.dtype == np.float64 else np.complex64)
    sign = 1 if inverse else -1
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    if _is_pow2(n):
        return _fft_pow2_last(a, sign)
    return a @ _dft_matrix(n, sign).astype(a.dtype, copy=False)


def dft2(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalized 2D DFT over the trailing two axes."""
    out = dft_last(a, inverse)
    out = np.swapaxes(out, -1, -2)
    out = dft_last(out, inverse)
    return np.ascontiguousarray(np.swapaxes(out, -1, -2))
