"""Checkpoint files.

Layout (little-endian): magic ``PLCK``, version u16, 32-byte config hash,
then named tensors: name length u16 + UTF-8 name, rank u8, dims u32 each,
float64 payload.  Model parameters, optimizer moments (``opt.m.*`` /
``opt.v.*``) and scalar run state (``meta.*``) all ride the same tensor
encoding; names are written sorted so identical state gives identical
bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import TrainConfig, config_hash
from .errors import CheckpointError

MAGIC = b"PLCK"
VERSION = 1


def write_checkpoint(path, cfg: TrainConfig, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(config_hash(cfg))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f8")  # tobytes() emits C order
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def read_checkpoint(path) -> tuple[bytes, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stored_hash = blob[6:38]
    pos = 38
    tensors: dict[str, np.ndarray] = {}
    while pos < len(blob):
        try:
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode()
            pos += name_len
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos) if rank else ()
            pos += 4 * rank
            count = int(np.prod(dims)) if dims else 1
            end = pos + 8 * count
            if end > len(blob):
                raise CheckpointError("truncated tensor payload")
            arr = np.frombuffer(blob[pos:end], dtype="<f8").reshape(dims).copy()
            pos = end
        except struct.error as e:
            raise CheckpointError(f"malformed checkpoint record: {e}") from e
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = arr
    return stored_hash, tensors


def verify_config(stored_hash: bytes, cfg: TrainConfig) -> None:
    if stored_hash != config_hash(cfg):
        raise CheckpointError("checkpoint was produced under a different config")
