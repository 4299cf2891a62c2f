"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"VMOE"                       magic
    u32   format version
    u32   length of metadata JSON, then the UTF-8 JSON bytes
          (model config + RNG stream states)
    u32   tensor count
    per tensor:
      u32 name length, name bytes (UTF-8)
      u32 rank
      u64 x rank dims
      f64 x prod(dims) row-major payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..numkit import Tensor
from .vit import ModelConfig

MAGIC = b"VMOE"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    config: ModelConfig
    rng_states: dict = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps({"config": ckpt.config.to_dict(), "rng": ckpt.rng_states}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(ckpt.params))]
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name].data, dtype="<f8")
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def from_bytes(blob: bytes) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    off = 4

    def take(fmt: str):
        nonlocal off
        vals = struct.unpack_from(fmt, blob, off)
        off += struct.calcsize(fmt)
        return vals

    try:
        (version,) = take("<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (mlen,) = take("<I")
        meta = json.loads(blob[off:off + mlen].decode())
        off += mlen
        (count,) = take("<I")
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (nlen,) = take("<I")
            name = blob[off:off + nlen].decode()
            off += nlen
            (rank,) = take("<I")
            dims = take(f"<{rank}Q") if rank else ()
            n = int(np.prod(dims)) if rank else 1
            if off + 8 * n > len(blob):
                raise CheckpointError(f"truncated checkpoint: tensor {name!r} payload cut short")
            data = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(dims)
            off += 8 * n
            params[name] = Tensor(data, requires_grad=True)
        config = ModelConfig(**meta["config"])
        rng_states = meta["rng"]
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if off != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return Checkpoint(params, config, rng_states)


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
