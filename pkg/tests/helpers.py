"""Shared test oracles: brute-force DFTs and finite-difference gradients."""
from __future__ import annotations

import numpy as np

from moepot.tensor import Tape, Tensor, backward


def naive_dft2(field: np.ndarray) -> np.ndarray:
    """Direct O(N^4) evaluation of the unnormalized 2D DFT (last two axes)."""
    field = np.asarray(field, dtype=np.float64)
    h, w = field.shape[-2:]
    out = np.zeros(field.shape, dtype=np.complex128)
    for k1 in range(h):
        for k2 in range(w):
            acc = np.zeros(field.shape[:-2], dtype=np.complex128)
            for x in range(h):
                for y in range(w):
                    acc = acc + field[..., x, y] * np.exp(-2j * np.pi * (k1 * x / h + k2 * y / w))
            out[..., k1, k2] = acc
    return out


def naive_idft2(spec: np.ndarray) -> np.ndarray:
    """Direct normalized inverse of naive_dft2."""
    spec = np.asarray(spec, dtype=np.complex128)
    h, w = spec.shape[-2:]
    out = np.zeros(spec.shape, dtype=np.complex128)
    for x in range(h):
        for y in range(w):
            acc = np.zeros(spec.shape[:-2], dtype=np.complex128)
            for k1 in range(h):
                for k2 in range(w):
                    acc = acc + spec[..., k1, k2] * np.exp(2j * np.pi * (k1 * x / h + k2 * y / w))
            out[..., x, y] = acc / (h * w)
    return out


def fd_gradient(loss_fn, tensors: dict[str, Tensor], step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar loss over named double tensors.

    loss_fn() must recompute the loss from the live tensor data each call.
    """
    grads = {}
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = loss_fn()
            flat[i] = keep - step
            down = loss_fn()
            flat[i] = keep
            g[i] = (up - down) / (2.0 * step)
        grads[name] = g.reshape(t.data.shape)
    return grads


def tape_gradient(build_loss, tensors: dict[str, Tensor]) -> tuple[float, dict[str, np.ndarray]]:
    """Run build_loss() under a tape and return (loss value, named gradients)."""
    for t in tensors.values():
        t.requires_grad = True
    with Tape() as tape:
        loss = build_loss()
    gmap = backward(tape, loss)
    out = {}
    for name, t in tensors.items():
        g = gmap.get(t)
        out[name] = np.zeros_like(t.data) if g is None else g.data
    return loss.item(), out


def check_grads(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray],
                rtol: float = 1e-5, floor: float = 1e-8) -> None:
    """Assert |a - n| <= rtol * max(|a|, |n|) + floor elementwise."""
    for name in numeric:
        a, n = analytic[name], numeric[name]
        err = np.abs(a - n)
        bound = rtol * np.maximum(np.abs(a), np.abs(n)) + floor
        bad = err > bound
        if bad.any():
            i = int(np.argmax(err - bound))
            raise AssertionError(
                f"{name}: gradient mismatch at flat index {i}: "
                f"analytic {a.flat[i]:.6e} vs numeric {n.flat[i]:.6e}"
            )
