"""BNCK checkpoint container.

Layout (little-endian)::

    magic  "BNCK"
    version u32, stage u8 (0 none, 1 stage-1, 2 stage-2), iteration u64, seed u64
    count u32
    count x { name_len u16, name utf-8, ndim u8, dims u32[ndim], data f32[prod(dims)] }

Tensors are written in insertion order, so write -> read -> write is
byte-identical.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"BNCK"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    stage: int = 0
    iteration: int = 0
    seed: int = 0
    version: int = VERSION

    def subset(self, prefix: str, strip: bool = True) -> dict[str, np.ndarray]:
        return {
            (k[len(prefix):] if strip else k): v for k, v in self.tensors.items() if k.startswith(prefix)
        }

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<IBQQI", self.version, self.stage, self.iteration, self.seed, len(self.tensors))]
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise FormatError(f"bad checkpoint magic {buf[:4]!r}", offset=0)
        head = struct.calcsize("<IBQQI")
        pos = 4
        _need(buf, pos, head)
        version, stage, iteration, seed, count = struct.unpack_from("<IBQQI", buf, pos)
        pos += head
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            _need(buf, pos, 2)
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            _need(buf, pos, nlen + 1)
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            ndim = buf[pos]
            pos += 1
            _need(buf, pos, 4 * ndim)
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            _need(buf, pos, nbytes)
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).astype(np.float32).reshape(dims)
            pos += nbytes
        if pos != len(buf):
            raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", offset=pos)
        return cls(tensors, stage=stage, iteration=iteration, seed=seed, version=version)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _need(buf: bytes, pos: int, n: int) -> None:
    if pos + n > len(buf):
        raise FormatError(f"truncated checkpoint: need {n} bytes, {len(buf) - pos} left", offset=pos)


def tensors_digest(tensors: dict[str, np.ndarray]) -> str:
    """Order-sensitive SHA-256 over names and raw f32 bytes."""
    h = hashlib.sha256()
    for name, arr in tensors.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()
