"""Metrics, auto-regressive rollout, and router-signature interpretability.

The dataset classifier follows the gate-signature recipe: per sample, average
each block's full softmax routing vector over tokens; build per-dataset
centroids on a calibration split; classify test samples by minimum
cross-entropy against the centroids.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import TrajectorySet, heldout_indices, valid_starts
from .errors import ContractError, NumericError
from .model import ExpertCallCounter, ModelParams, forward

# smoothing applied to centroids before taking logarithms
CENTROID_SMOOTHING = 1e-8

Predictor = Callable[[np.ndarray], np.ndarray]        # [B,T,C,H,W] -> [B,C,H,W]
SignatureFn = Callable[[np.ndarray], np.ndarray]      # [B,T,C,H,W] -> [B,L,N_r]


def l2re(pred: np.ndarray, gt: np.ndarray) -> float:
    """Relative L2 error over all elements."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {gt.shape}")
    denom = float(np.linalg.norm(gt.ravel()))
    if denom == 0.0:
        raise NumericError("relative error undefined for zero ground truth")
    return float(np.linalg.norm((pred - gt).ravel())) / denom


def model_predictor(params: ModelParams) -> Predictor:
    def fn(windows: np.ndarray) -> np.ndarray:
        pred, _ = forward(params, windows)
        return pred.data
    return fn


def model_signature_fn(params: ModelParams) -> SignatureFn:
    def fn(windows: np.ndarray) -> np.ndarray:
        _, gates = forward(params, windows)
        b = windows.shape[0]
        per_block = []
        for g in gates:
            w = g.full_weights.data.reshape(b, g.tokens_per_sample, -1)
            per_block.append(w.mean(axis=1))
        return np.stack(per_block, axis=1)  # [B, L, N_r]
    return fn


def rollout(predict: Predictor, window: np.ndarray, steps: int) -> np.ndarray:
    """Feed predictions back as inputs: [T,C,H,W] or [B,T,C,H,W] -> predicted
    frames [steps,C,H,W] (or batched)."""
    if steps < 0:
        raise ContractError("steps must be >= 0")
    single = window.ndim == 4
    state = window[None] if single else window
    outs = []
    for _ in range(steps):
        nxt = predict(state)
        outs.append(nxt)
        state = np.concatenate([state[:, 1:], nxt[:, None]], axis=1)
    if not outs:
        shape = (state.shape[0], 0) + state.shape[2:]
        result = np.zeros(shape, dtype=state.dtype)
    else:
        result = np.stack(outs, axis=1)
    return result[0] if single else result


def error_accumulation(predict: Predictor, dataset: TrajectorySet, window: int,
                       horizons: Sequence[int]) -> dict[int, float]:
    """Mean held-out rollout L2RE at each requested horizon (1-indexed)."""
    frames = dataset.trajectories
    idx = heldout_indices(dataset.n_traj)
    max_h = max(horizons)
    if window + max_h > dataset.n_frames:
        raise ContractError(
            f"horizon {max_h} exceeds the {dataset.n_frames}-frame trajectories")
    if any(h < 1 for h in horizons):
        raise ContractError("horizons are 1-indexed rollout depths")
    init = frames[idx, 0:window]
    preds = rollout(predict, init, max_h)
    out = {}
    for h in horizons:
        errs = [l2re(preds[i, h - 1], frames[t, window + h - 1])
                for i, t in enumerate(idx)]
        out[h] = float(np.mean(errs))
    return out


# ---------------------------------------------------------------------------
# gate signatures and classification

@dataclass
class GateSignature:
    """Per-block token-averaged routing distribution of one sample: [L, N_r]."""

    per_block: np.ndarray

    def __post_init__(self):
        sums = self.per_block.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ContractError("each block signature must sum to 1")


@dataclass
class Centroids:
    """Mean signature per dataset: [n_datasets, L, N_r], plus sample counts."""

    means: np.ndarray
    counts: list[int]
    dataset_ids: list[str]


def gate_signature(params: ModelParams, sample: np.ndarray) -> GateSignature:
    """Signature of one window [T, C, H, W]."""
    sig = model_signature_fn(params)(sample[None])[0]
    return GateSignature(per_block=sig)


def heldout_windows(dataset: TrajectorySet, window: int,
                    max_per_traj: int | None = None) -> np.ndarray:
    """All (or a deterministic subset of) valid windows of the held-out split."""
    frames = dataset.trajectories
    idx = heldout_indices(dataset.n_traj)
    starts = valid_starts(dataset.n_frames, window)
    take = range(starts) if max_per_traj is None else \
        np.linspace(0, starts - 1, num=min(max_per_traj, starts), dtype=int)
    wins = [frames[i, s:s + window] for i in idx for s in take]
    return np.stack(wins)


def split_calibration_test(n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 50/50 split of held-out trajectory positions."""
    if n < 2:
        return np.array([0]), np.array([0])
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    half = n // 2
    return np.sort(order[:half]), np.sort(order[half:])


def signatures_for(signature_fn: SignatureFn, windows: np.ndarray,
                   batch: int = 32) -> np.ndarray:
    sigs = []
    for i in range(0, windows.shape[0], batch):
        sigs.append(signature_fn(windows[i:i + batch]))
    return np.concatenate(sigs, axis=0)


def build_centroids(signature_fn: SignatureFn,
                    windows_per_dataset: Sequence[np.ndarray],
                    dataset_ids: Sequence[str]) -> Centroids:
    """Mean gate signature per dataset over its calibration windows."""
    means, counts = [], []
    for wins in windows_per_dataset:
        if wins.shape[0] < 1:
            raise ContractError("every dataset must contribute at least one sample")
        sigs = signatures_for(signature_fn, wins)
        means.append(sigs.mean(axis=0))
        counts.append(sigs.shape[0])
    return Centroids(means=np.stack(means), counts=counts,
                     dataset_ids=list(dataset_ids))


def classify_dataset(signature: np.ndarray, centroids: Centroids, block: int) -> int:
    """argmin_i of the cross-entropy -sum_k sig_k * log(centroid_ik) at one block.

    Centroids are smoothed as Y <- (Y + d) / (1 + N_r * d) before the logs;
    ties break toward the lowest dataset index.
    """
    sig = np.asarray(signature)
    if sig.ndim == 2:
        sig = sig[block]
    n_r = sig.shape[0]
    y = centroids.means[:, block, :]
    y = (y + CENTROID_SMOOTHING) / (1.0 + n_r * CENTROID_SMOOTHING)
    scores = -(sig[None, :] * np.log(y)).sum(axis=1)
    return int(np.argmin(scores))  # argmin returns the first (lowest) index on ties


def classification_accuracy(signature_fn: SignatureFn,
                            cal_windows: Sequence[np.ndarray],
                            test_windows: Sequence[np.ndarray],
                            dataset_ids: Sequence[str],
                            block: int) -> float:
    """Fraction of test windows classified to their true dataset at one block."""
    centroids = build_centroids(signature_fn, cal_windows, dataset_ids)
    hits = 0
    total = 0
    for true_idx, wins in enumerate(test_windows):
        sigs = signatures_for(signature_fn, wins)
        for s in sigs:
            hits += int(classify_dataset(s, centroids, block) == true_idx)
            total += 1
    if total == 0:
        raise ContractError("no test samples")
    return hits / total


def expert_usage(params: ModelParams, windows: np.ndarray, block: int,
                 batch: int = 32) -> np.ndarray:
    """usage[i]: fraction of tokens whose Top-K selection includes expert i."""
    if windows.shape[0] < 1:
        raise ContractError("dataset must contribute at least one window")
    n_routed = params.config.n_routed
    counts = np.zeros(n_routed, dtype=np.float64)
    tokens = 0
    for i in range(0, windows.shape[0], batch):
        _, gates = forward(params, windows[i:i + batch])
        sel = gates[block].selected_idx
        tokens += sel.shape[0]
        for j in range(n_routed):
            counts[j] += (sel == j).any(axis=1).sum()
    return counts / tokens


# ---------------------------------------------------------------------------
# report emission

def binomial_interval(p: float, n: int, z: float = 1.96) -> tuple[float, float]:
    half = z * float(np.sqrt(p * (1 - p) / n))
    return p - half, p + half


def write_pgm(path, field: np.ndarray) -> None:
    """8-bit binary PGM with min-max normalization."""
    field = np.asarray(field, dtype=np.float64)
    lo, hi = field.min(), field.max()
    scaled = np.zeros_like(field) if hi == lo else (field - lo) / (hi - lo)
    pixels = (scaled * 255.0 + 0.5).astype(np.uint8)
    header = f"P5\n{field.shape[1]} {field.shape[0]}\n255\n".encode()
    with open(path, "wb") as f:
        f.write(header)
        f.write(pixels.tobytes())
