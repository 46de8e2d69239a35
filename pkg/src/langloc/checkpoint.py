"""Binary checkpoint container with a bit-exact round trip.

Layout (all integers little-endian unsigned 64-bit unless noted):

    magic    4 bytes  b"LLCK"
    version  u32      currently 1
    config   u64 byte length + UTF-8 JSON of the ModelConfig fields
    count    u64      number of tensor blocks
    blocks   repeated: name (u64 length + UTF-8), ndim (u64),
             dims (u64 each), raw little-endian float64 data (C order)

Position tables are pure functions of the config and are rebuilt on load.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams

MAGIC = b"LLCK"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


def _pack_bytes(payload: bytes) -> bytes:
    return struct.pack("<Q", len(payload)) + payload


def save(path, params: ModelParams, config: ModelConfig) -> None:
    named = params.named_parameters()
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(_pack_bytes(json.dumps(config.to_dict(), sort_keys=True).encode()))
    parts.append(struct.pack("<Q", len(named)))
    for name, tensor in named:
        # asarray keeps 0-d tensors 0-d (ascontiguousarray would promote them)
        arr = np.asarray(tensor.data, dtype="<f8", order="C")
        parts.append(_pack_bytes(name.encode()))
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError("checkpoint file is truncated")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load(path) -> tuple[ModelParams, ModelConfig]:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"bad magic bytes in {path}")
    version = struct.unpack("<I", reader.take(4))[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = ModelConfig(**json.loads(reader.take(reader.u64()).decode()))
    count = reader.u64()

    # build a skeleton with the right shapes, then overwrite every tensor
    params = ModelParams.init(config, seed=0)
    by_name = dict(params.named_parameters())
    if count != len(by_name):
        raise CheckpointError(
            f"checkpoint holds {count} tensors, config implies {len(by_name)}"
        )
    seen = set()
    for _ in range(count):
        name = reader.take(reader.u64()).decode()
        ndim = reader.u64()
        shape = tuple(reader.u64() for _ in range(ndim))
        n_values = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(8 * n_values), dtype="<f8").reshape(shape)
        if name not in by_name:
            raise CheckpointError(f"unknown tensor {name!r} in checkpoint")
        by_name[name].assign(data)
        seen.add(name)
    if reader.off != len(reader.blob):
        raise CheckpointError("trailing bytes after the last tensor block")
    missing = set(by_name) - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)}")
    return params, config
