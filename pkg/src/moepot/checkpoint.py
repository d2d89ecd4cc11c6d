"""Checkpoint files.

Layout (little-endian): magic "MPCK", u32 version=1, u32-length-prefixed UTF-8
config JSON, name table (u32 count; per entry: u32-length-prefixed name, u8
dtype tag (0=f32, 1=f64), u32 rank, u32 extents, u64 byte offset into the
payload), payload blob, trailing u32 CRC32 of everything before it.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError, BadVersionError, ChecksumError, ConfigConflictError,
    ContractError, TruncatedFileError,
)
from .model import ModelConfig, ModelParams, init_params
from .optim import AdamState
from .tensor import Tensor
from .training import Checkpoint, TrainConfig

MAGIC = b"MPCK"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _collect_tensors(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    table: dict[str, np.ndarray] = {}
    for name, t in ckpt.params.named_tensors():
        table[name] = t.data
    for name, m in ckpt.adam.first_moment.items():
        table[f"adam.m.{name}"] = m
    for name, v in ckpt.adam.second_moment.items():
        table[f"adam.v.{name}"] = v
    return table


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    config_text = json.dumps({
        "model": ckpt.model_config.to_dict(),
        "train": ckpt.train_config.to_dict(),
        "adam": {
            "beta1": ckpt.adam.beta1,
            "beta2": ckpt.adam.beta2,
            "weight_decay": ckpt.adam.weight_decay,
            "eps_stability": ckpt.adam.eps_stability,
            "step_count": ckpt.adam.step_count,
        },
        "global_step": ckpt.global_step,
        "rng_state": ckpt.rng_state,
    }, sort_keys=True).encode("utf-8")

    tensors = _collect_tensors(ckpt)
    entries = bytearray()
    payload = bytearray()
    entries += struct.pack("<I", len(tensors))
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _DTYPE_TAGS:
            raise ContractError(f"tensor {name} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        entries += struct.pack("<I", len(nb)) + nb
        entries += struct.pack("<B", _DTYPE_TAGS[arr.dtype])
        entries += struct.pack("<I", arr.ndim)
        entries += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        entries += struct.pack("<Q", len(payload))
        payload += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()

    body = (MAGIC + struct.pack("<I", VERSION)
            + struct.pack("<I", len(config_text)) + config_text
            + bytes(entries) + bytes(payload))
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + struct.pack("<I", crc))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise TruncatedFileError(
                f"{self.path}: needed {n} bytes at offset {self.off}, "
                f"file has {len(self.blob)}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def read_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise TruncatedFileError(f"{path}: too short ({len(blob)} bytes)")
    body = blob[:-4]
    # structure first (truncation is reported as such), checksum second
    r = _Reader(body, path)
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path}: bad magic at offset 0")
    version = r.u32()
    if version != VERSION:
        raise BadVersionError(f"{path}: unsupported checkpoint version {version}")
    config_blob = r.take(r.u32())

    count = r.u32()
    entries = []
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        tag = r.u8()
        if tag not in _TAG_DTYPES:
            raise ContractError(f"{path}: unknown dtype tag {tag} for {name}")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        offset = r.u64()
        entries.append((name, tag, shape, offset))
    payload = body[r.off:]

    arrays: dict[str, np.ndarray] = {}
    for name, tag, shape, offset in entries:
        dtype = _TAG_DTYPES[tag]
        n = int(np.prod(shape)) if shape else 1
        end = offset + n * dtype.itemsize
        if end > len(payload):
            raise TruncatedFileError(f"{path}: payload for {name} runs past end of file")
        arrays[name] = np.frombuffer(payload, dtype=dtype, count=n,
                                     offset=offset).reshape(shape).copy()

    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    config = json.loads(config_blob.decode("utf-8"))

    model_config = ModelConfig.from_dict(config["model"])
    train_config = TrainConfig.from_dict(config["train"])
    params = init_params(model_config, seed=train_config.seed,
                         precision="single")
    for name, t in params.named_tensors():
        if name not in arrays:
            raise ContractError(f"{path}: checkpoint is missing tensor {name}")
        arr = arrays.pop(name)
        if arr.shape != t.data.shape:
            raise ContractError(
                f"{path}: tensor {name} has shape {arr.shape}, expected {t.data.shape}")
        t.data = np.ascontiguousarray(arr)  # keep the stored precision

    adam = AdamState(
        beta1=config["adam"]["beta1"],
        beta2=config["adam"]["beta2"],
        weight_decay=config["adam"]["weight_decay"],
        eps_stability=config["adam"]["eps_stability"],
        step_count=config["adam"]["step_count"],
    )
    for full, arr in arrays.items():
        if full.startswith("adam.m."):
            adam.first_moment[full[len("adam.m."):]] = arr
        elif full.startswith("adam.v."):
            adam.second_moment[full[len("adam.v."):]] = arr
        else:
            raise ContractError(f"{path}: unexpected tensor {full} in checkpoint")
    return Checkpoint(
        model_config=model_config,
        train_config=train_config,
        params=params,
        adam=adam,
        global_step=config["global_step"],
        rng_state=config["rng_state"],
    )


def require_matching_config(ckpt: Checkpoint, requested: ModelConfig) -> None:
    if ckpt.model_config.to_dict() != requested.to_dict():
        raise ConfigConflictError(
            "checkpoint model configuration conflicts with the requested one: "
            f"{ckpt.model_config.to_dict()} vs {requested.to_dict()}")
