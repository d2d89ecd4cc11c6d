"""Denoising pre-training over a dataset mixture, and router-frozen fine-tuning.

Each optimizer step draws a balanced batch of windows, perturbs the inputs
(pre-training only), minimizes the one-step squared error plus the per-block
balance losses, and applies a one-cycle-scheduled Adam update with global
gradient clipping. Runs are bit-reproducible from (seed, configs, datasets).
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import (
    SampleWindow, TrajectorySet, balanced_sampler, heldout_indices,
    inject_noise, train_count, valid_starts, window_at,
)
from .errors import ConfigError, ContractError, NumericError
from .model import (
    GateDecision, ModelConfig, ModelParams, balance_loss, forward, init_params,
)
from .optim import AdamState, adam_step, clip_global_norm
from .tensor import Tape, Tensor, add, backward, mul, scale, sub, tsum

log = logging.getLogger("moepot")

METRICS_HEADER = "epoch,step,phase,dataset,l2re,pred_mse,balance_loss,lr,seed"

# held-out windows scored per trajectory in the per-epoch metrics pass
EVAL_WINDOWS_PER_TRAJ = 2


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    epochs: int = 10
    warmup_fraction: float = 0.2
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.9
    weight_decay: float = 1e-6
    eps_coef: float = 1e-3
    seed: int = 0
    steps_per_epoch: int = 50
    phase: str = "pretrain"
    clip_norm: float = 1.0

    def validate(self) -> None:
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if not (0.0 < self.warmup_fraction < 1.0):
            raise ConfigError("warmup_fraction must lie in (0, 1)")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs >= 0, steps_per_epoch >= 1, batch_size >= 1 required")
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.eps_coef < 0:
            raise ConfigError("eps_coef must be >= 0")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class LossBreakdown:
    prediction_mse: Tensor
    balance_per_block: list[Tensor]
    total: Tensor


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: ModelParams
    adam: AdamState
    global_step: int
    rng_state: dict


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    init_params_sha256: str


def one_cycle_lr(step: int, total_steps: int, warmup_fraction: float,
                 peak_lr: float) -> float:
    """Linear ramp 0 -> peak over the warmup span, then half-cosine to 0."""
    if step < 0 or step > total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    warmup = warmup_fraction * total_steps
    if step <= warmup:
        return peak_lr * (step / warmup)
    span = total_steps - warmup
    frac = (step - warmup) / span
    return peak_lr * 0.5 * (1.0 + float(np.cos(np.pi * frac)))


def compute_loss(inputs: np.ndarray, targets: np.ndarray, params: ModelParams,
                 w_bal: float, *, predict_fn: Callable | None = None) -> LossBreakdown:
    """Mean over the batch of the squared error plus per-block balance terms.

    inputs [B, T, C, H, W] and targets [B, C, H, W] are consumed as given;
    noise injection happens upstream in the batch assembly (pre-training only).
    predict_fn overrides the model forward (test stubs).
    """
    if inputs.ndim != 5 or targets.ndim != 4 or inputs.shape[0] != targets.shape[0]:
        raise ContractError("batch shapes must be [B,T,C,H,W] and [B,C,H,W]")
    if inputs.shape[0] < 1:
        raise ContractError("batch must be non-empty")
    if predict_fn is None:
        pred, gates = forward(params, inputs)
    else:
        pred, gates = predict_fn(inputs)
    err = sub(pred, Tensor._wrap(np.ascontiguousarray(targets, dtype=pred.dtype)))
    pred_mse = scale(tsum(mul(err, err)), 1.0 / inputs.shape[0])
    balance = [balance_loss(g, w_bal) for g in gates]
    total = pred_mse
    for b in balance:
        total = add(total, b)
    return LossBreakdown(prediction_mse=pred_mse, balance_per_block=balance, total=total)


def _params_sha256(params: ModelParams) -> str:
    digest = hashlib.sha256()
    for name, t in params.named_tensors():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(t.data).tobytes())
    return digest.hexdigest()


def _assemble_batch(sets: Sequence[TrajectorySet], sampler, batch_size: int,
                    window: int, eps_coef: float, noise_rng: np.random.Generator | None
                    ) -> tuple[np.ndarray, np.ndarray, list[int]]:
    windows: list[SampleWindow] = []
    ids: list[int] = []
    for _ in range(batch_size):
        k, traj, start = next(sampler)
        win = window_at(sets[k], traj, start, window)
        if noise_rng is not None and eps_coef > 0:
            win = inject_noise(win, eps_coef, noise_rng)
        windows.append(win)
        ids.append(k)
    inputs = np.stack([w.input for w in windows])
    targets = np.stack([w.target for w in windows])
    return inputs, targets, ids


def _heldout_l2re(params: ModelParams, dataset: TrajectorySet, window: int) -> float:
    """Mean one-step relative L2 error over a fixed held-out window set."""
    frames = dataset.trajectories
    idx = heldout_indices(dataset.n_traj)
    starts = valid_starts(dataset.n_frames, window)
    probe = np.linspace(0, starts - 1, num=min(EVAL_WINDOWS_PER_TRAJ, starts), dtype=int)
    inputs, targets = [], []
    for i in idx:
        for s in probe:
            inputs.append(frames[i, s:s + window])
            targets.append(frames[i, s + window])
    inputs = np.stack(inputs)
    targets = np.stack(targets)
    pred, _ = forward(params, inputs)
    errs = []
    for b in range(inputs.shape[0]):
        denom = float(np.linalg.norm(targets[b].ravel()))
        if denom == 0:
            raise NumericError("held-out target has zero norm")
        errs.append(float(np.linalg.norm((pred.data[b] - targets[b]).ravel())) / denom)
    return float(np.mean(errs))


def _mixture_sanity(sets: Sequence[TrajectorySet], model_config: ModelConfig) -> None:
    for s in sets:
        if s.channels != model_config.channels:
            raise ConfigError(
                f"dataset {s.dataset_id} has {s.channels} channels, model expects "
                f"{model_config.channels}")
        if s.grid != (model_config.grid_h, model_config.grid_w):
            raise ConfigError(
                f"dataset {s.dataset_id} grid {s.grid} mismatches model "
                f"{(model_config.grid_h, model_config.grid_w)}")
        if s.n_frames <= model_config.t_window:
            raise ConfigError(f"dataset {s.dataset_id} too short for the input window")


def _run_loop(sets: Sequence[TrajectorySet], weights: Sequence[float],
              model_config: ModelConfig, train_config: TrainConfig,
              params: ModelParams, adam: AdamState, frozen: set[str],
              start_step: int) -> TrainResult:
    t_window = model_config.t_window
    sampler = balanced_sampler(
        list(weights),
        [train_count(s.n_traj) for s in sets],
        [valid_starts(s.n_frames, t_window) for s in sets],
        seed=train_config.seed,
    )
    noise_rng = (np.random.default_rng(np.random.SeedSequence([train_config.seed, 1]))
                 if train_config.phase == "pretrain" else None)
    total_steps = train_config.epochs * train_config.steps_per_epoch
    init_hash = _params_sha256(params)
    all_params = params.parameter_dict()
    trainable = {n: p for n, p in all_params.items() if n not in frozen}
    params.set_requires_grad(False)
    for p in trainable.values():
        p.requires_grad = True

    metrics: list[dict] = []
    step = 0
    for epoch in range(train_config.epochs):
        epoch_mse, epoch_bal = [], []
        for _ in range(train_config.steps_per_epoch):
            inputs, targets, ids = _assemble_batch(
                sets, sampler, train_config.batch_size, t_window,
                train_config.eps_coef, noise_rng)
            with Tape() as tape:
                breakdown = compute_loss(inputs, targets, params, model_config.w_bal)
            total = breakdown.total.item()
            if not np.isfinite(total):
                mix_desc = ",".join(sets[k].dataset_id for k in sorted(set(ids)))
                raise NumericError(
                    f"non-finite loss at step {step} (batch drawn from {mix_desc})")
            gmap = backward(tape, breakdown.total)
            grads = {n: gmap[p].data for n, p in trainable.items() if p in gmap}
            clip_global_norm(grads, train_config.clip_norm)
            # sample the schedule mid-step so the applied lr is never exactly 0
            lr = one_cycle_lr(step + 0.5, total_steps, train_config.warmup_fraction,
                              train_config.peak_lr)
            adam_step(trainable, grads, adam, lr)
            epoch_mse.append(breakdown.prediction_mse.item())
            epoch_bal.append(float(np.mean([b.item() for b in breakdown.balance_per_block])))
            step += 1
        for k, dataset in enumerate(sets):
            metrics.append({
                "epoch": epoch,
                "step": start_step + step,
                "phase": train_config.phase,
                "dataset": dataset.dataset_id,
                "l2re": _heldout_l2re(params, dataset, t_window),
                "pred_mse": float(np.mean(epoch_mse)),
                "balance_loss": float(np.mean(epoch_bal)),
                "lr": one_cycle_lr(step, total_steps, train_config.warmup_fraction,
                                   train_config.peak_lr) if total_steps else 0.0,
                "seed": train_config.seed,
            })
        log.info("epoch %d/%d: pred_mse=%.5f", epoch + 1, train_config.epochs,
                 float(np.mean(epoch_mse)))
    params.set_requires_grad(False)
    rng_state = noise_rng.bit_generator.state if noise_rng is not None else {}
    checkpoint = Checkpoint(
        model_config=model_config,
        train_config=train_config,
        params=params,
        adam=adam,
        global_step=start_step + step,
        rng_state=rng_state,
    )
    return TrainResult(checkpoint=checkpoint, metrics=metrics,
                       init_params_sha256=init_hash)


def pretrain(sets: Sequence[TrajectorySet], weights: Sequence[float],
             model_config: ModelConfig, train_config: TrainConfig) -> TrainResult:
    """Denoising pre-training from a fresh initialization over the mixture."""
    model_config.validate()
    train_config.validate()
    if train_config.phase != "pretrain":
        train_config = replace(train_config, phase="pretrain")
    if len(sets) != len(weights) or not sets:
        raise ConfigError("mixture needs matching datasets and weights")
    _mixture_sanity(sets, model_config)
    params = init_params(model_config, seed=train_config.seed, precision="single")
    adam = AdamState.init(params.parameter_dict(), beta1=train_config.beta1,
                          beta2=train_config.beta2,
                          weight_decay=train_config.weight_decay)
    return _run_loop(sets, weights, model_config, train_config, params, adam,
                     frozen=set(), start_step=0)


def finetune(checkpoint: Checkpoint, dataset: TrajectorySet,
             train_config: TrainConfig) -> TrainResult:
    """Single-dataset tuning with the router frozen and no input noise."""
    train_config = replace(train_config, phase="finetune")
    train_config.validate()
    model_config = checkpoint.model_config
    _mixture_sanity([dataset], model_config)
    params = checkpoint.params
    frozen = set(params.router_parameter_names())
    trainable = {n: p for n, p in params.parameter_dict().items() if n not in frozen}
    adam = AdamState.init(trainable, beta1=train_config.beta1,
                          beta2=train_config.beta2,
                          weight_decay=train_config.weight_decay)
    return _run_loop([dataset], [1.0], model_config, train_config, params, adam,
                     frozen=frozen, start_step=checkpoint.global_step)


def metrics_csv(rows: list[dict]) -> str:
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(
            f"{r['epoch']},{r['step']},{r['phase']},{r['dataset']},"
            f"{r['l2re']:.8f},{r['pred_mse']:.8f},{r['balance_loss']:.8f},"
            f"{r['lr']:.10f},{r['seed']}"
        )
    return "\n".join(lines) + "\n"
