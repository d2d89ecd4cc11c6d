"""Synthetic PDE trajectory generation and the training-side preprocessing.

Three families on the periodic unit square, each with an analytic or
brute-force oracle: heat (exact spectral decay), advection (exact spectral
shift), and a scalar reaction-diffusion equation u_t = D*lap(u) + u - u^3
stepped by explicit finite differences. Preprocessing follows the mixture
pipeline: resolution unification, channel padding + masking, balanced
sampling across datasets, and relative-scale Gaussian noise on inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .errors import ConfigError, ContractError

FAMILIES = ("heat", "advection", "reaction_diffusion")

# modes |k| <= GRF_BAND populate the random initial fields
GRF_BAND = 4


@dataclass
class FamilyParams:
    family: str
    grid: tuple[int, int] = (32, 32)
    dt: float = 0.1
    T_total: int = 24
    n_traj: int = 20
    seed: int = 0
    nu: float = 2e-3              # heat diffusivity
    c: tuple[float, float] = (0.5, 0.25)  # advection velocity
    D: float = 1e-3               # reaction-diffusion diffusivity
    amplitude: float = 1.0

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.T_total < 12:
            raise ConfigError("T_total must be >= 12 (window of 10 plus at least 2 targets)")
        h, w = self.grid
        if h < 2 or w < 2:
            raise ConfigError("grid extents must be >= 2")
        if self.n_traj < 1:
            raise ConfigError("need at least one trajectory")
        if self.family == "heat" and self.nu < 0:
            raise ConfigError("heat diffusivity must be >= 0")
        if self.family == "reaction_diffusion":
            if self.D < 0:
                raise ConfigError("reaction-diffusion diffusivity must be >= 0")
            dx2 = 1.0 / max(h, w) ** 2
            if self.D * self.dt / dx2 > 0.25 + 1e-12:
                raise ConfigError(
                    f"explicit step unstable: D*dt/dx^2 = {self.D * self.dt / dx2:.3f} > 0.25"
                )

    def to_meta(self) -> dict:
        return {
            "family": self.family,
            "grid": list(self.grid),
            "dt": self.dt,
            "T_total": self.T_total,
            "n_traj": self.n_traj,
            "seed": self.seed,
            "nu": self.nu,
            "c": list(self.c),
            "D": self.D,
            "amplitude": self.amplitude,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "FamilyParams":
        return cls(
            family=meta["family"],
            grid=tuple(meta["grid"]),
            dt=meta["dt"],
            T_total=meta["T_total"],
            n_traj=meta["n_traj"],
            seed=meta["seed"],
            nu=meta["nu"],
            c=tuple(meta["c"]),
            D=meta["D"],
            amplitude=meta["amplitude"],
        )


@dataclass
class TrajectorySet:
    """[N, T_total, C, H, W] frames plus dataset metadata.

    The pipeline and the file format use float32; generators can also emit
    float64 sets for oracle-precision checks.
    """

    trajectories: np.ndarray
    dataset_id: str
    params: FamilyParams
    has_mask: bool = False

    def __post_init__(self):
        if self.trajectories.ndim != 5:
            raise ContractError("trajectories must be [N, T, C, H, W]")
        arr = np.asarray(self.trajectories)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.trajectories = np.ascontiguousarray(arr)
        if self.has_mask:
            mask = self.trajectories[:, :, -1]
            if not np.all((mask == 0) | (mask == 1)):
                raise ContractError("mask channel must be binary")

    @property
    def n_traj(self) -> int:
        return self.trajectories.shape[0]

    @property
    def n_frames(self) -> int:
        return self.trajectories.shape[1]

    @property
    def channels(self) -> int:
        return self.trajectories.shape[2]

    @property
    def grid(self) -> tuple[int, int]:
        return self.trajectories.shape[3], self.trajectories.shape[4]


@dataclass
class MixtureSpec:
    """Dataset paths with strictly positive importance weights."""

    entries: list[tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("mixture must name at least one dataset")
        for path, w in self.entries:
            if w <= 0:
                raise ConfigError(f"mixture weight for {path} must be > 0, got {w}")


@dataclass
class SampleWindow:
    """T consecutive input frames and the immediately following target frame."""

    input: np.ndarray    # [T, C, H, W]
    target: np.ndarray   # [C, H, W]
    dataset_id: str
    traj_index: int
    start: int


# ---------------------------------------------------------------------------
# generators

def _signed_freqs(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.where(k <= n // 2, k, k - n)


def _grf_initial(rng: np.random.Generator, h: int, w: int, amplitude: float) -> np.ndarray:
    """Band-limited Gaussian random field: modes with |k| <= GRF_BAND."""
    k1 = _signed_freqs(h)[:, None]
    k2 = _signed_freqs(w)[None, :]
    band = np.sqrt(k1 ** 2 + k2 ** 2) <= GRF_BAND
    coeff = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
    coeff *= band
    field_ = np.fft.ifft2(coeff).real
    rms = float(np.sqrt(np.mean(field_ ** 2)))
    if rms > 0:
        field_ = field_ * (amplitude / rms)
    return field_.astype(np.float64)


def _initial_fields(params: FamilyParams, u0: np.ndarray | None) -> np.ndarray:
    h, w = params.grid
    if u0 is not None:
        u0 = np.asarray(u0, dtype=np.float64)
        if u0.shape != (h, w):
            raise ContractError(f"u0 shape {u0.shape} mismatches grid {(h, w)}")
        return np.repeat(u0[None], params.n_traj, axis=0)
    rng = np.random.default_rng(params.seed)
    return np.stack([_grf_initial(rng, h, w, params.amplitude) for _ in range(params.n_traj)])


def gen_heat(params: FamilyParams, u0: np.ndarray | None = None,
             dtype=np.float32) -> TrajectorySet:
    """Spectral evolution of u_t = nu * lap(u): mode (k1, k2) decays by
    exp(-nu * 4*pi^2 * (k1^2 + k2^2) * t)."""
    params.validate()
    if params.family != "heat":
        raise ConfigError("gen_heat requires family='heat'")
    h, w = params.grid
    fields = _initial_fields(params, u0)
    k1 = _signed_freqs(h)[:, None]
    k2 = _signed_freqs(w)[None, :]
    ksq = k1.astype(np.float64) ** 2 + k2.astype(np.float64) ** 2
    spec0 = np.fft.fft2(fields)  # [N, H, W]
    frames = np.empty((params.n_traj, params.T_total, 1, h, w), dtype=dtype)
    for t in range(params.T_total):
        decay = np.exp(-params.nu * 4.0 * np.pi ** 2 * ksq * (t * params.dt))
        frames[:, t, 0] = np.fft.ifft2(spec0 * decay).real.astype(dtype)
    return TrajectorySet(frames, dataset_id=f"heat-s{params.seed}", params=params)


def gen_advection(params: FamilyParams, u0: np.ndarray | None = None,
                  dtype=np.float32) -> TrajectorySet:
    """Exact spectral transport: frame t is the initial field shifted by c*t."""
    params.validate()
    if params.family != "advection":
        raise ConfigError("gen_advection requires family='advection'")
    h, w = params.grid
    fields = _initial_fields(params, u0)
    k1 = _signed_freqs(h)[:, None].astype(np.float64)
    k2 = _signed_freqs(w)[None, :].astype(np.float64)
    cx, cy = params.c  # cx moves along rows (x), cy along columns (y)
    spec0 = np.fft.fft2(fields)
    frames = np.empty((params.n_traj, params.T_total, 1, h, w), dtype=dtype)
    for t in range(params.T_total):
        shift = np.exp(-2j * np.pi * (k1 * cx + k2 * cy) * (t * params.dt))
        frames[:, t, 0] = np.fft.ifft2(spec0 * shift).real.astype(dtype)
    return TrajectorySet(frames, dataset_id=f"advection-s{params.seed}", params=params)


def _laplacian_periodic(u: np.ndarray, h: int, w: int) -> np.ndarray:
    dx2 = 1.0 / (h * h)
    dy2 = 1.0 / (w * w)
    return (
        (np.roll(u, 1, axis=-2) + np.roll(u, -1, axis=-2) - 2 * u) / dx2
        + (np.roll(u, 1, axis=-1) + np.roll(u, -1, axis=-1) - 2 * u) / dy2
    )


def gen_reaction_diffusion(params: FamilyParams, u0: np.ndarray | None = None,
                           dtype=np.float32) -> TrajectorySet:
    """Explicit Euler stepping of u_t = D*lap(u) + u - u^3 (5-point stencil)."""
    params.validate()
    if params.family != "reaction_diffusion":
        raise ConfigError("gen_reaction_diffusion requires family='reaction_diffusion'")
    h, w = params.grid
    u = _initial_fields(params, u0)
    # substeps keep the diffusion number comfortably inside the bound
    dx2 = 1.0 / max(h, w) ** 2
    n_sub = 1
    if params.D > 0:
        n_sub = max(1, math.ceil(params.D * params.dt / (0.2 * dx2)))
    dt_sub = params.dt / n_sub
    frames = np.empty((params.n_traj, params.T_total, 1, h, w), dtype=dtype)
    frames[:, 0, 0] = u.astype(dtype)
    for t in range(1, params.T_total):
        for _ in range(n_sub):
            u = u + dt_sub * (params.D * _laplacian_periodic(u, h, w) + u - u ** 3)
        frames[:, t, 0] = u.astype(dtype)
    if not np.all(np.isfinite(frames)):
        raise ConfigError("reaction-diffusion stepping diverged; reduce dt or D")
    return TrajectorySet(frames, dataset_id=f"reaction_diffusion-s{params.seed}", params=params)


GENERATORS = {
    "heat": gen_heat,
    "advection": gen_advection,
    "reaction_diffusion": gen_reaction_diffusion,
}


def generate(params: FamilyParams, u0: np.ndarray | None = None,
             dtype=np.float32) -> TrajectorySet:
    params.validate()
    return GENERATORS[params.family](params, u0, dtype)


# ---------------------------------------------------------------------------
# preprocessing

def unify_resolution(traj: TrajectorySet, h_target: int) -> TrajectorySet:
    """Resample to h_target x h_target: periodic bilinear up, strided down."""
    if h_target < 2:
        raise ConfigError("target resolution must be >= 2")
    h, w = traj.grid
    if h == h_target and w == h_target:
        return traj
    dtype = traj.trajectories.dtype
    frames = traj.trajectories.astype(np.float64)
    out = _resample_axis(frames, 3, h, h_target)
    out = _resample_axis(out, 4, w, h_target)
    new_params = replace(traj.params, grid=(h_target, h_target))
    return TrajectorySet(out.astype(dtype), traj.dataset_id, new_params, traj.has_mask)


def _resample_axis(arr: np.ndarray, axis: int, n_src: int, n_dst: int) -> np.ndarray:
    if n_src == n_dst:
        return arr
    if n_src % n_dst == 0:
        stride = n_src // n_dst
        index = [slice(None)] * arr.ndim
        index[axis] = slice(0, n_src, stride)
        return arr[tuple(index)]
    # periodic bilinear: destination i samples source coordinate i * n_src/n_dst
    coords = np.arange(n_dst) * (n_src / n_dst)
    lo = np.floor(coords).astype(int) % n_src
    hi = (lo + 1) % n_src
    frac = coords - np.floor(coords)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = n_dst
    f = frac.reshape(shape)
    return a * (1 - f) + b * f


def pad_channels(traj: TrajectorySet, c_max: int, fill: float = 1.0,
                 add_mask: bool = False) -> TrajectorySet:
    """Pad to c_max channels with a constant fill; optionally append a mask."""
    n, t, c, h, w = traj.trajectories.shape
    base = c - 1 if traj.has_mask else c
    if base > c_max:
        raise ContractError(f"dataset has {base} channels, more than c_max={c_max}")
    data = traj.trajectories
    if traj.has_mask:
        payload, mask = data[:, :, :-1], data[:, :, -1:]
    else:
        payload, mask = data, None
    dtype = traj.trajectories.dtype
    if base < c_max:
        padding = np.full((n, t, c_max - base, h, w), fill, dtype=dtype)
        payload = np.concatenate([payload, padding], axis=2)
    has_mask = traj.has_mask or add_mask
    if has_mask:
        if mask is None:
            mask = np.ones((n, t, 1, h, w), dtype=dtype)
        payload = np.concatenate([payload, mask], axis=2)
    if payload.shape == data.shape and np.array_equal(payload, data) and has_mask == traj.has_mask:
        return traj
    return TrajectorySet(payload, traj.dataset_id, traj.params, has_mask)


# ---------------------------------------------------------------------------
# splits and sampling

def train_count(n_traj: int) -> int:
    """All but the held-out tail (last 10%, at least one trajectory)."""
    held = max(1, n_traj // 10)
    return max(1, n_traj - held)


def heldout_indices(n_traj: int) -> np.ndarray:
    return np.arange(train_count(n_traj), n_traj)


def valid_starts(n_frames: int, window: int) -> int:
    starts = n_frames - window
    if starts < 1:
        raise ContractError(f"trajectory of {n_frames} frames cannot host a {window}+1 window")
    return starts


def balanced_sampler(weights: list[float], sizes: list[int], n_starts: list[int],
                     seed: int) -> Iterator[tuple[int, int, int]]:
    """Infinite stream of (dataset index, trajectory index, window start).

    Dataset k is drawn with probability w_k / sum(w); trajectory and start
    uniform within the dataset. Reproducible from the seed.
    """
    if not weights:
        raise ConfigError("empty mixture")
    if len(weights) != len(sizes) or len(weights) != len(n_starts):
        raise ContractError("weights, sizes and n_starts must align")
    if any(s < 1 for s in sizes):
        raise ConfigError("every dataset needs at least one sampleable trajectory")
    p = np.asarray(weights, dtype=np.float64)
    if np.any(p <= 0):
        raise ConfigError("mixture weights must be positive")
    p = p / p.sum()
    rng = np.random.default_rng(seed)
    k_sets = len(weights)
    while True:
        k = int(rng.choice(k_sets, p=p))
        traj = int(rng.integers(0, sizes[k]))
        start = int(rng.integers(0, n_starts[k]))
        yield k, traj, start


def window_at(traj: TrajectorySet, traj_index: int, start: int, window: int) -> SampleWindow:
    frames = traj.trajectories
    if start < 0 or start + window >= frames.shape[1]:
        raise ContractError(f"window start {start} out of range for {frames.shape[1]} frames")
    return SampleWindow(
        input=frames[traj_index, start:start + window],
        target=frames[traj_index, start + window],
        dataset_id=traj.dataset_id,
        traj_index=traj_index,
        start=start,
    )


def inject_noise(window: SampleWindow, eps_coef: float, rng: np.random.Generator) -> SampleWindow:
    """Add i.i.d. Gaussian noise at eps_coef x RMS(input window) to the inputs."""
    if eps_coef < 0:
        raise ConfigError("noise coefficient must be >= 0")
    if eps_coef == 0:
        return window
    rms = float(np.sqrt(np.mean(window.input.astype(np.float64) ** 2)))
    noise = rng.standard_normal(window.input.shape).astype(window.input.dtype)
    noisy = window.input + (eps_coef * rms) * noise
    return SampleWindow(noisy, window.target, window.dataset_id, window.traj_index, window.start)
