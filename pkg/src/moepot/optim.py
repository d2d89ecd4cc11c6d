"""Adam optimizer with decoupled weight decay, on named parameter groups."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared scalar knobs."""

    beta1: float = 0.9
    beta2: float = 0.9
    weight_decay: float = 0.0
    eps_stability: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict[str, Tensor], beta1=0.9, beta2=0.9,
             weight_decay=0.0, eps_stability=1e-8) -> "AdamState":
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        state = cls(beta1=beta1, beta2=beta2, weight_decay=weight_decay,
                    eps_stability=eps_stability)
        for name, p in params.items():
            state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update with decoupled weight decay.

    Parameters are updated in place (their .data is rebound to fresh arrays;
    previously shared views stay valid). Missing gradients count as zero.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif isinstance(g, Tensor):
            g = g.data
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} mismatches parameter {name} {p.data.shape}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps_stability)
        new = p.data - lr * (update + state.weight_decay * p.data)
        p.data = new.astype(p.data.dtype, copy=False)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        arr = g.data if isinstance(g, Tensor) else g
        total += float(np.sum(arr.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for name in list(grads.keys()):
            arr = grads[name].data if isinstance(grads[name], Tensor) else grads[name]
            grads[name] = arr * factor
    return norm
