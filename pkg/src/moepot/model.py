"""The sparse-expert operator network.

Forward pipeline: per-frame patch embedding with positional encodings,
temporal aggregation of the window into one latent map via per-step linear
maps and per-channel complex phases, then N blocks of (spectral token mixing
+ sparse mixture-of-experts), then a linear depatchifying decoder.

Latent maps are [B, d_z, Hp, Wp]; token matrices are [B*Np, d_z] with tokens
flattened batch-major then row-major over the patch grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import (
    ACTIVATIONS, Tape, Tensor, add, concat, dft2, div, gather_rows,
    idft2_real, matmul, mul, narrow, patches_to_space, reshape, scale,
    scatter_add_rows, softmax, space_to_patches, sub, take_per_row, tmean,
    transpose, tsqrt, tsum, unfold_periodic,
)

NORM_EPS = 1e-6


@dataclass
class ModelConfig:
    d_z: int = 32
    d_mlp: int = 32
    n_blocks: int = 2
    heads: int = 2
    patch: int = 4
    n_routed: int = 8
    n_shared: int = 1
    top_k: int = 2
    w_bal: float = 0.1
    channels: int = 1
    t_window: int = 10
    grid_h: int = 32
    grid_w: int = 32
    activation: str = "gelu"
    router_kernel: int = 1
    expert_kernel: int = 3
    mode_cap: int | None = None

    def validate(self) -> None:
        if self.d_z % self.heads != 0:
            raise ConfigError(f"heads={self.heads} must divide d_z={self.d_z}")
        if self.grid_h % self.patch or self.grid_w % self.patch:
            raise ConfigError(f"patch={self.patch} must divide grid {self.grid_h}x{self.grid_w}")
        if not (1 <= self.top_k <= self.n_routed):
            raise ConfigError(f"need 1 <= top_k <= n_routed, got {self.top_k}/{self.n_routed}")
        if self.n_shared < 0:
            raise ConfigError("n_shared must be >= 0")
        if self.w_bal < 0:
            raise ConfigError("w_bal must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.router_kernel % 2 != 1 or self.expert_kernel % 2 != 1:
            raise ConfigError("router/expert kernels must be odd")
        for name in ("d_z", "d_mlp", "n_blocks", "heads", "patch", "n_routed",
                     "channels", "t_window", "grid_h", "grid_w"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def tokens_h(self) -> int:
        return self.grid_h // self.patch

    @property
    def tokens_w(self) -> int:
        return self.grid_w // self.patch

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# parameter containers

@dataclass
class PatchEmbedParams:
    kernel: Tensor      # [d_z, C, P, P]
    bias: Tensor        # [d_z]
    pos_map: Tensor     # [C, 3]: weights over normalized (x, y, t)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.kernel", self.kernel
        yield f"{prefix}.bias", self.bias
        yield f"{prefix}.pos_map", self.pos_map


@dataclass
class TemporalAggParams:
    step_maps: Tensor   # [T, d_z, d_z]
    gamma: Tensor       # [d_z] fixed per-channel phase constants (not trained)
    post_proj: Tensor   # [d_z, 2*d_z]
    post_bias: Tensor   # [d_z]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.step_maps", self.step_maps
        yield f"{prefix}.post_proj", self.post_proj
        yield f"{prefix}.post_bias", self.post_bias

    def buffers(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.gamma", self.gamma


@dataclass
class FourierLayerParams:
    w1: Tensor  # [h, d_z/h, d_z/h]
    b1: Tensor  # [h, d_z/h]
    w2: Tensor  # [h, d_z/h, d_z/h]
    b2: Tensor  # [h, d_z/h]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


@dataclass
class RouterParams:
    kernel: Tensor  # [N_r, d_z, k, k]
    bias: Tensor    # [N_r]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.kernel", self.kernel
        yield f"{prefix}.bias", self.bias


@dataclass
class ExpertParams:
    w1: Tensor  # [d_mlp, d_z, k, k]
    b1: Tensor  # [d_mlp]
    w2: Tensor  # [d_z, d_mlp, k, k]
    b2: Tensor  # [d_z]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


@dataclass
class NormParams:
    gain: Tensor   # [d_z]
    shift: Tensor  # [d_z]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.shift", self.shift


@dataclass
class BlockParams:
    norm_mix: NormParams
    fourier: FourierLayerParams
    norm_moe: NormParams
    router: RouterParams
    shared: list[ExpertParams]
    routed: list[ExpertParams]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.norm_mix.named(f"{prefix}.norm_mix")
        yield from self.fourier.named(f"{prefix}.fourier")
        yield from self.norm_moe.named(f"{prefix}.norm_moe")
        yield from self.router.named(f"{prefix}.router")
        for i, e in enumerate(self.shared):
            yield from e.named(f"{prefix}.shared.{i}")
        for i, e in enumerate(self.routed):
            yield from e.named(f"{prefix}.routed.{i}")


@dataclass
class DecoderParams:
    weight: Tensor  # [C*P*P, d_z]
    bias: Tensor    # [C*P*P]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class ModelParams:
    config: ModelConfig
    patch: PatchEmbedParams
    temporal: TemporalAggParams
    blocks: list[BlockParams]
    decoder: DecoderParams

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.patch.named("patch")
        yield from self.temporal.named("temporal")
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"blocks.{i}")
        yield from self.decoder.named("decoder")

    def named_buffers(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.temporal.buffers("temporal")

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.named_parameters()
        yield from self.named_buffers()

    def parameter_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def router_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if ".router." in n]

    def set_requires_grad(self, flag: bool) -> None:
        for _, p in self.named_parameters():
            p.requires_grad = flag


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    std = float(np.sqrt(2.0 / fan_in))
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


def init_params(config: ModelConfig, seed: int = 0, precision: str = "single") -> ModelParams:
    """Seeded parameter initialization.

    Spectral and expert weights are He-scaled; per-step temporal maps start
    near identity; router weights start tiny so initial gates are near uniform.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = np.float32 if precision == "single" else np.float64
    c, dz, dm, p = config.channels, config.d_z, config.d_mlp, config.patch
    t, h = config.t_window, config.heads
    dh = dz // h
    ek, rk = config.expert_kernel, config.router_kernel

    patch = PatchEmbedParams(
        kernel=_he(rng, (dz, c, p, p), c * p * p, dtype),
        bias=Tensor(np.zeros(dz, dtype=dtype), requires_grad=True),
        pos_map=Tensor((rng.standard_normal((c, 3)) * 0.02).astype(dtype), requires_grad=True),
    )
    eye = np.eye(dz, dtype=dtype)
    temporal = TemporalAggParams(
        step_maps=Tensor(
            (np.repeat(eye[None], t, axis=0) + rng.standard_normal((t, dz, dz)) * 0.02).astype(dtype),
            requires_grad=True,
        ),
        gamma=Tensor(np.linspace(0.0, np.pi, dz, endpoint=False).astype(dtype)),
        post_proj=_he(rng, (dz, 2 * dz), 2 * dz, dtype),
        post_bias=Tensor(np.zeros(dz, dtype=dtype), requires_grad=True),
    )

    def expert() -> ExpertParams:
        return ExpertParams(
            w1=_he(rng, (dm, dz, ek, ek), dz * ek * ek, dtype),
            b1=Tensor(np.zeros(dm, dtype=dtype), requires_grad=True),
            w2=_he(rng, (dz, dm, ek, ek), dm * ek * ek, dtype),
            b2=Tensor(np.zeros(dz, dtype=dtype), requires_grad=True),
        )

    def norm() -> NormParams:
        return NormParams(
            gain=Tensor(np.ones(dz, dtype=dtype), requires_grad=True),
            shift=Tensor(np.zeros(dz, dtype=dtype), requires_grad=True),
        )

    blocks = []
    for _ in range(config.n_blocks):
        blocks.append(BlockParams(
            norm_mix=norm(),
            fourier=FourierLayerParams(
                w1=_he(rng, (h, dh, dh), dh, dtype),
                b1=Tensor(np.zeros((h, dh), dtype=dtype), requires_grad=True),
                w2=_he(rng, (h, dh, dh), dh, dtype),
                b2=Tensor(np.zeros((h, dh), dtype=dtype), requires_grad=True),
            ),
            norm_moe=norm(),
            # zero router weights: initial gates are exactly uniform, so the
            # untrained model carries no family information in its signatures
            router=RouterParams(
                kernel=Tensor(np.zeros((config.n_routed, dz, rk, rk), dtype=dtype),
                              requires_grad=True),
                bias=Tensor(np.zeros(config.n_routed, dtype=dtype), requires_grad=True),
            ),
            shared=[expert() for _ in range(config.n_shared)],
            routed=[expert() for _ in range(config.n_routed)],
        ))
    cpp = c * p * p
    decoder = DecoderParams(
        weight=Tensor((rng.standard_normal((cpp, dz)) * np.sqrt(1.0 / dz)).astype(dtype),
                      requires_grad=True),
        bias=Tensor(np.zeros(cpp, dtype=dtype), requires_grad=True),
    )
    return ModelParams(config=config, patch=patch, temporal=temporal, blocks=blocks,
                       decoder=decoder)


# ---------------------------------------------------------------------------
# gating records and instrumentation

@dataclass
class GateDecision:
    """Per-token routing record for one block over a whole batch."""

    block: int
    full_weights: Tensor        # [B*Np, N_r], rows sum to 1
    selected_idx: np.ndarray    # [B*Np, K] expert indices, weight-descending
    selected_weights: Tensor    # [B*Np, K] the matching softmax entries
    batch: int
    tokens_per_sample: int

    def importance(self) -> Tensor:
        """Batch-summed gate weight per expert (the balance-loss statistic)."""
        return tsum(self.full_weights, axis=0)


class ExpertCallCounter:
    """Counts routed-expert output evaluations per token (test instrumentation)."""

    def __init__(self):
        self.records: list[tuple[int, int, np.ndarray]] = []

    def record(self, block: int, expert: int, token_rows: np.ndarray) -> None:
        self.records.append((block, expert, token_rows.copy()))

    def per_token_counts(self, block: int, n_tokens: int) -> np.ndarray:
        counts = np.zeros(n_tokens, dtype=int)
        for blk, _, rows in self.records:
            if blk == block:
                counts[rows] += 1
        return counts


# ---------------------------------------------------------------------------
# operations

def conv2d_periodic(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Periodic same-size convolution of [B, C, H, W] with [O, C, k, k]."""
    b, c, h, w = x.shape
    o, ci, k, _ = kernel.shape
    if ci != c:
        raise ContractError(f"kernel expects {ci} channels, input has {c}")
    cols = unfold_periodic(x, k)                       # [B, Np, C*k*k]
    rows = reshape(cols, (b * h * w, c * k * k))
    wt = transpose(reshape(kernel, (o, c * k * k)), (1, 0))
    y = add(matmul(rows, wt), reshape(bias, (1, o)))
    return transpose(reshape(y, (b, h, w, o)), (0, 3, 1, 2))


def _positional_field(params: PatchEmbedParams, config: ModelConfig,
                      dtype) -> Tensor:
    """p^t over the window: [T, C, H, W] from normalized (x, y, t) coords."""
    t, h, w = config.t_window, config.grid_h, config.grid_w
    xs = np.arange(h, dtype=np.float64) / h
    ys = np.arange(w, dtype=np.float64) / w
    ts = np.arange(t, dtype=np.float64) / max(t - 1, 1)
    coords = np.empty((t, h, w, 3), dtype=np.float64)
    coords[..., 0] = xs[None, :, None]
    coords[..., 1] = ys[None, None, :]
    coords[..., 2] = ts[:, None, None]
    coords_t = Tensor._wrap(coords.reshape(t * h * w, 3).astype(dtype))
    pos = matmul(coords_t, transpose(params.pos_map, (1, 0)))   # [T*H*W, C]
    return transpose(reshape(pos, (t, h, w, config.channels)), (0, 3, 1, 2))


def patchify(window: Tensor, params: PatchEmbedParams, config: ModelConfig) -> Tensor:
    """Embed a window [B, T, C, H, W] into per-frame tokens [B, T, Np, d_z]."""
    b, t, c, h, w = window.shape
    if t != config.t_window or c != config.channels or (h, w) != (config.grid_h, config.grid_w):
        raise ContractError(
            f"window [{t},{c},{h},{w}] mismatches config "
            f"[{config.t_window},{config.channels},{config.grid_h},{config.grid_w}]"
        )
    pos = _positional_field(params, config, window.dtype)       # [T, C, H, W]
    shifted = add(window, reshape(pos, (1, t, c, h, w)))
    frames = reshape(shifted, (b * t, c, h, w))
    patches = space_to_patches(frames, config.patch)            # [B*T, Np, C*P*P]
    np_tok = patches.shape[1]
    rows = reshape(patches, (b * t * np_tok, c * config.patch ** 2))
    wt = transpose(reshape(params.kernel, (config.d_z, c * config.patch ** 2)), (1, 0))
    tokens = add(matmul(rows, wt), reshape(params.bias, (1, config.d_z)))
    return reshape(tokens, (b, t, np_tok, config.d_z))


def temporal_aggregate(tokens: Tensor, params: TemporalAggParams,
                       config: ModelConfig) -> Tensor:
    """Collapse [B, T, Np, d_z] into a latent map [B, d_z, Hp, Wp].

    acc[c] = sum_t (W_t z^t)[c] * exp(-i * gamma_c * t) with t = 1..T; the real
    and imaginary accumulators are concatenated and linearly projected.
    """
    b, t, np_tok, dz = tokens.shape
    if t != config.t_window:
        raise ContractError(f"expected {config.t_window} steps, got {t}")
    gamma = params.gamma.data.astype(np.float64)
    acc_re = None
    acc_im = None
    for step in range(t):
        zt = reshape(narrow(tokens, 1, step, 1), (b * np_tok, dz))
        wt = narrow(params.step_maps, 0, step, 1)
        yt = matmul(zt, transpose(reshape(wt, (dz, dz)), (1, 0)))
        phase = gamma * (step + 1)
        cos_t = Tensor._wrap(np.cos(phase).astype(tokens.dtype).reshape(1, dz))
        sin_t = Tensor._wrap(np.sin(phase).astype(tokens.dtype).reshape(1, dz))
        re_part = mul(yt, cos_t)
        im_part = scale(mul(yt, sin_t), -1.0)
        acc_re = re_part if acc_re is None else add(acc_re, re_part)
        acc_im = im_part if acc_im is None else add(acc_im, im_part)
    both = concat([acc_re, acc_im], axis=1)                     # [B*Np, 2*d_z]
    out = add(matmul(both, transpose(params.post_proj, (1, 0))),
              reshape(params.post_bias, (1, dz)))
    hp, wp = config.tokens_h, config.tokens_w
    return transpose(reshape(out, (b, hp, wp, dz)), (0, 3, 1, 2))


def channel_norm(x: Tensor, params: NormParams) -> Tensor:
    """Per-sample, per-channel normalization over space, with learnable affine."""
    b, c, h, w = x.shape
    m = tmean(x, axis=(2, 3), keepdims=True)
    centered = sub(x, m)
    var = tmean(mul(centered, centered), axis=(2, 3), keepdims=True)
    denom = tsqrt(add(var, NORM_EPS))
    normed = div(centered, denom)
    gain = reshape(params.gain, (1, c, 1, 1))
    shift = reshape(params.shift, (1, c, 1, 1))
    return add(mul(normed, gain), shift)


def _mode_mask(hp: int, wp: int, cap: int, dtype) -> np.ndarray:
    k1 = np.arange(hp)
    k2 = np.arange(wp)
    s1 = np.where(k1 <= hp // 2, k1, k1 - hp)
    s2 = np.where(k2 <= wp // 2, k2, k2 - wp)
    keep = (np.abs(s1)[:, None] <= cap) & (np.abs(s2)[None, :] <= cap)
    return keep.astype(dtype)


def fourier_mix(latent: Tensor, params: FourierLayerParams,
                config: ModelConfig) -> Tensor:
    """Spectral token mixing: per-head frequency-domain MLP on channel groups.

    Each head's spectrum passes z -> W2 sigma(W1 z + b1) + b2 applied to the
    real and imaginary parts separately; the output takes the real part of the
    inverse transform (the elementwise nonlinearity breaks exact conjugate
    symmetry).
    """
    b, dz, hp, wp = latent.shape
    h = config.heads
    if dz % h:
        raise ContractError(f"heads={h} must divide latent width {dz}")
    dh = dz // h
    act = ACTIVATIONS[config.activation]
    mask = None
    if config.mode_cap is not None:
        mask = Tensor._wrap(_mode_mask(hp, wp, config.mode_cap, latent.dtype).reshape(1, 1, hp, wp))
    outs = []
    for i in range(h):
        xi = narrow(latent, 1, i * dh, dh)           # [B, dh, Hp, Wp]
        re, im = dft2(xi)
        if mask is not None:
            re, im = mul(re, mask), mul(im, mask)
        w1 = transpose(reshape(narrow(params.w1, 0, i, 1), (dh, dh)), (1, 0))
        w2 = transpose(reshape(narrow(params.w2, 0, i, 1), (dh, dh)), (1, 0))
        b1 = reshape(narrow(params.b1, 0, i, 1), (1, dh))
        b2 = reshape(narrow(params.b2, 0, i, 1), (1, dh))

        def freq_mlp(part: Tensor) -> Tensor:
            rows = reshape(transpose(part, (0, 2, 3, 1)), (b * hp * wp, dh))
            hcol = act(add(matmul(rows, w1), b1))
            ocol = add(matmul(hcol, w2), b2)
            return transpose(reshape(ocol, (b, hp, wp, dh)), (0, 3, 1, 2))

        re2, im2 = freq_mlp(re), freq_mlp(im)
        if mask is not None:
            re2, im2 = mul(re2, mask), mul(im2, mask)
        outs.append(idft2_real(re2, im2, strict=False))
    return concat(outs, axis=1)


def route(latent: Tensor, params: RouterParams, top_k: int, block: int = 0) -> GateDecision:
    """Per-token softmax gates with Top-K selection (ties to the lowest index)."""
    n_routed = params.kernel.shape[0]
    if not (1 <= top_k <= n_routed):
        raise ContractError(f"top_k={top_k} out of range for {n_routed} experts")
    b, dz, hp, wp = latent.shape
    logits = conv2d_periodic(latent, params.kernel, params.bias)  # [B, N_r, Hp, Wp]
    rows = reshape(transpose(logits, (0, 2, 3, 1)), (b * hp * wp, n_routed))
    full = softmax(rows, axis=1)
    order = np.argsort(-full.data, axis=1, kind="stable")
    selected_idx = np.ascontiguousarray(order[:, :top_k])
    selected_weights = take_per_row(full, selected_idx, unique=True)
    return GateDecision(
        block=block,
        full_weights=full,
        selected_idx=selected_idx,
        selected_weights=selected_weights,
        batch=b,
        tokens_per_sample=hp * wp,
    )


def _dilate_periodic(mask: np.ndarray, kernel: int) -> np.ndarray:
    r = kernel // 2
    out = mask.copy()
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy or dx:
                out |= np.roll(mask, shift=(dy, dx), axis=(1, 2))
    return out


def _expert_dense(x: Tensor, e: ExpertParams, act) -> Tensor:
    hidden = act(conv2d_periodic(x, e.w1, e.b1))
    return conv2d_periodic(hidden, e.w2, e.b2)


def moe_combine(latent: Tensor, shared: list[ExpertParams], routed: list[ExpertParams],
                gate: GateDecision, config: ModelConfig,
                counter: ExpertCallCounter | None = None) -> Tensor:
    """Average of shared experts plus the gate-weighted Top-K routed experts.

    Routed experts run sparsely: the first convolution is evaluated on the
    kernel-dilated set of each expert's selected tokens and the second only at
    the selected tokens, which reproduces the dense result exactly at those
    positions. Unselected experts are not evaluated at a token.
    """
    b, dz, hp, wp = latent.shape
    n_tok = b * hp * wp
    if gate.full_weights.shape != (n_tok, len(routed)):
        raise ContractError("gate decision does not match latent/expert shapes")
    act = ACTIVATIONS[config.activation]
    k = config.expert_kernel
    dm = config.d_mlp

    total = None
    if shared:
        for e in shared:
            y = _expert_dense(latent, e, act)
            total = y if total is None else add(total, y)
        total = scale(total, 1.0 / len(shared))

    cols1 = reshape(unfold_periodic(latent, k), (n_tok, dz * k * k))
    acc = None
    sel = gate.selected_idx
    for j, e in enumerate(routed):
        member = (sel == j).any(axis=1)              # tokens that selected expert j
        if not member.any():
            continue
        rows_out = np.flatnonzero(member)
        if counter is not None:
            counter.record(gate.block, j, rows_out)
        spatial = member.reshape(b, hp, wp)
        rows_hidden = np.flatnonzero(_dilate_periodic(spatial, k).reshape(-1))
        w1 = transpose(reshape(e.w1, (dm, dz * k * k)), (1, 0))
        hidden_rows = act(add(matmul(gather_rows(cols1, rows_hidden, unique=True), w1),
                              reshape(e.b1, (1, dm))))
        canvas = scatter_add_rows(hidden_rows, rows_hidden, n_tok)   # [n_tok, dm]
        canvas = transpose(reshape(canvas, (b, hp, wp, dm)), (0, 3, 1, 2))
        cols2 = reshape(unfold_periodic(canvas, k), (n_tok, dm * k * k))
        w2 = transpose(reshape(e.w2, (dz, dm * k * k)), (1, 0))
        out_rows = add(matmul(gather_rows(cols2, rows_out, unique=True), w2),
                       reshape(e.b2, (1, dz)))
        weight_col = narrow(gather_rows(gate.full_weights, rows_out, unique=True), 1, j, 1)
        contrib = scatter_add_rows(mul(out_rows, weight_col), rows_out, n_tok)
        acc = contrib if acc is None else add(acc, contrib)
    if acc is not None:
        routed_map = transpose(reshape(acc, (b, hp, wp, dz)), (0, 3, 1, 2))
        total = routed_map if total is None else add(total, routed_map)
    if total is None:
        total = Tensor._wrap(np.zeros_like(latent.data))
    return total


def balance_loss(gate: GateDecision, w_bal: float) -> Tensor:
    """w_bal * squared coefficient of variation of per-expert importance."""
    if gate.full_weights.shape[0] < 1:
        raise ContractError("balance loss needs at least one token")
    imp = gate.importance()
    m = tmean(imp)
    centered = sub(imp, m)
    var = tmean(mul(centered, centered))   # population variance
    return scale(div(var, mul(m, m)), w_bal)


def decode(latent: Tensor, params: DecoderParams, config: ModelConfig) -> Tensor:
    """Per-token linear map d_z -> C*P*P, rearranged into the output frame."""
    b, dz, hp, wp = latent.shape
    rows = reshape(transpose(latent, (0, 2, 3, 1)), (b * hp * wp, dz))
    pix = add(matmul(rows, transpose(params.weight, (1, 0))),
              reshape(params.bias, (1, params.bias.shape[0])))
    patches = reshape(pix, (b, hp * wp, config.channels * config.patch ** 2))
    return patches_to_space(patches, config.patch, config.channels, hp, wp)


def forward(params: ModelParams, window, *, counter: ExpertCallCounter | None = None
            ) -> tuple[Tensor, list[GateDecision]]:
    """Window [B, T, C, H, W] -> (next-frame prediction [B, C, H, W], gates)."""
    config = params.config
    if not isinstance(window, Tensor):
        window = Tensor._wrap(np.ascontiguousarray(window))
    if window.data.ndim != 5:
        raise ContractError("forward expects a batched window [B, T, C, H, W]")
    tokens = patchify(window, params.patch, config)
    x = temporal_aggregate(tokens, params.temporal, config)
    gates: list[GateDecision] = []
    for i, blk in enumerate(params.blocks):
        x = add(x, fourier_mix(channel_norm(x, blk.norm_mix), blk.fourier, config))
        pre = channel_norm(x, blk.norm_moe)
        gate = route(pre, blk.router, config.top_k, block=i)
        gates.append(gate)
        x = add(x, moe_combine(pre, blk.shared, blk.routed, gate, config, counter))
    return decode(x, params.decoder, config), gates


def predict(params: ModelParams, window: np.ndarray) -> np.ndarray:
    """Single-window convenience: [T, C, H, W] -> [C, H, W], no tape."""
    pred, _ = forward(params, window[None])
    return pred.data[0]


# ---------------------------------------------------------------------------
# parameter accounting

@dataclass
class ParamCounts:
    total: int
    activated: int
    per_expert: int
    expert_fraction_num: int      # N_s + K
    expert_fraction_den: int      # N_s + N_r

    @property
    def activated_expert_fraction(self) -> float:
        return self.expert_fraction_num / self.expert_fraction_den


def count_params(config: ModelConfig) -> ParamCounts:
    """Total vs activated learnable scalars.

    Activated counts replace each block's N_r routed experts by the K that a
    token evaluates; everything else (shared experts, router, spectral mixer,
    embedding, decoder, norms) is always active.
    """
    config.validate()
    c, dz, dm, p = config.channels, config.d_z, config.d_mlp, config.patch
    ek, rk, h = config.expert_kernel, config.router_kernel, config.heads
    dh = dz // h
    per_expert = dm * dz * ek * ek + dm + dz * dm * ek * ek + dz
    embed = dz * c * p * p + dz + c * 3
    temporal = config.t_window * dz * dz + dz * 2 * dz + dz
    fourier = h * (2 * dh * dh + 2 * dh)
    router = config.n_routed * dz * rk * rk + config.n_routed
    norms = 4 * dz
    decoder = c * p * p * dz + c * p * p
    block_always = fourier + router + norms + config.n_shared * per_expert
    total = embed + temporal + decoder + config.n_blocks * (
        block_always + config.n_routed * per_expert)
    activated = embed + temporal + decoder + config.n_blocks * (
        block_always + config.top_k * per_expert)
    return ParamCounts(
        total=total,
        activated=activated,
        per_expert=per_expert,
        expert_fraction_num=config.n_shared + config.top_k,
        expert_fraction_den=config.n_shared + config.n_routed,
    )
