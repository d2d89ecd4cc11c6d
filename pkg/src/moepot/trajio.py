"""Binary trajectory files.

Layout (little-endian): magic "MPOT", u32 version=1, u32 N, T_total, C, H, W,
mask_flag, then N*T_total*C*H*W float32 values in [trajectory][frame][channel]
[row][col] order, then a u32-length-prefixed UTF-8 JSON metadata string.
The reader validates the total file length exactly.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import FamilyParams, TrajectorySet
from .errors import BadMagicError, BadVersionError, ContractError, TruncatedFileError

MAGIC = b"MPOT"
VERSION = 1
_HEADER = struct.Struct("<4s7I")  # magic, version, N, T, C, H, W, mask_flag


def write_trajectories(traj: TrajectorySet, path: str | Path) -> None:
    if traj.trajectories.dtype != np.float32:
        raise ContractError("trajectory files store float32; convert the set first")
    n, t, c, h, w = traj.trajectories.shape
    meta = {
        "dataset_id": traj.dataset_id,
        "params": traj.params.to_meta(),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, n, t, c, h, w, 1 if traj.has_mask else 0))
        f.write(np.ascontiguousarray(traj.trajectories, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)


def read_trajectories(path: str | Path) -> TrajectorySet:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{path}: only {len(blob)} bytes, header needs {_HEADER.size}")
    magic, version, n, t, c, h, w, mask_flag = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise BadVersionError(f"{path}: unsupported version {version} at offset 4")
    payload_len = n * t * c * h * w * 4
    offset = _HEADER.size
    if len(blob) < offset + payload_len + 4:
        raise TruncatedFileError(
            f"{path}: payload or metadata length truncated at offset {len(blob)}"
        )
    values = np.frombuffer(blob, dtype="<f4", count=n * t * c * h * w, offset=offset)
    offset += payload_len
    (meta_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if len(blob) != offset + meta_len:
        raise TruncatedFileError(
            f"{path}: expected {offset + meta_len} bytes total, found {len(blob)}"
        )
    meta = json.loads(blob[offset:offset + meta_len].decode("utf-8"))
    params = FamilyParams.from_meta(meta["params"])
    frames = values.reshape(n, t, c, h, w).copy()
    return TrajectorySet(frames, dataset_id=meta["dataset_id"], params=params,
                         has_mask=bool(mask_flag))
