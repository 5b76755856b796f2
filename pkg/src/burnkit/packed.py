"""Bit-packed sign matrices and the XNOR-popcount GEMM used for inference.

Bit ``i`` of word ``j`` in a row holds the sign of column ``64*j + i``
(1 for +1, 0 for -1).  Rows are padded to a whole number of 64-bit words
with zero bits; since both operands pad with zeros, padding never shows up
in the XOR popcount.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError

WORD_BITS = 64


@dataclass
class PackedMatrix:
    rows: int
    cols: int
    words: np.ndarray  # uint64, shape (rows, words_per_row)
    scale: np.ndarray | None = None  # optional per-row f32 factors

    @property
    def words_per_row(self) -> int:
        return self.words.shape[1]

    def to_bytes(self) -> bytes:
        return struct.pack("<II", self.rows, self.cols) + self.words.astype("<u8", copy=False).tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PackedMatrix":
        if len(buf) < 8:
            raise FormatError(f"packed matrix header needs 8 bytes, got {len(buf)}", offset=len(buf))
        rows, cols = struct.unpack_from("<II", buf, 0)
        wpr = -(-cols // WORD_BITS)
        expected = 8 + rows * wpr * 8
        if len(buf) != expected:
            raise FormatError(f"packed matrix body: expected {expected} bytes, got {len(buf)}", offset=min(len(buf), expected))
        words = np.frombuffer(buf, dtype="<u8", offset=8).astype(np.uint64).reshape(rows, wpr)
        return cls(rows, cols, words)


def pack_signs(m, scale: np.ndarray | None = None) -> PackedMatrix:
    """Pack the signs of a 2-D array row by row (sign(0) counts as +1)."""
    m = np.asarray(m)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DimensionError(f"pack_signs expects a matrix, got shape {m.shape}")
    rows, cols = m.shape
    wpr = max(1, -(-cols // WORD_BITS))
    bits = np.zeros((rows, wpr * WORD_BITS), dtype=bool)
    bits[:, :cols] = m >= 0
    packed = np.packbits(bits, axis=1, bitorder="little")
    words = np.ascontiguousarray(packed).view("<u8").astype(np.uint64).reshape(rows, wpr)
    return PackedMatrix(rows, cols, words, None if scale is None else np.asarray(scale, np.float32))


def unpack_signs(p: PackedMatrix) -> np.ndarray:
    """Inverse of :func:`pack_signs`: a +-1 float32 matrix."""
    raw = p.words.astype("<u8").view(np.uint8).reshape(p.rows, -1)
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, : p.cols]
    return np.where(bits == 1, 1.0, -1.0).astype(np.float32)


def transpose_packed(p: PackedMatrix) -> PackedMatrix:
    return pack_signs(unpack_signs(p).T)


def xnor_gemm_t(a: PackedMatrix, bt: PackedMatrix, row_block: int = 64) -> np.ndarray:
    """``a @ bt.T`` for +-1 matrices, where ``bt`` is the row-packed transpose of B.

    Entry (i, j) is ``k - 2 * popcount(a_i XOR bt_j)``.
    """
    if a.cols != bt.cols:
        raise DimensionError(f"xnor_gemm inner dims differ: {a.cols} vs {bt.cols}")
    k = a.cols
    out = np.empty((a.rows, bt.rows), dtype=np.int32)
    for i0 in range(0, a.rows, row_block):
        x = np.bitwise_xor(a.words[i0:i0 + row_block, None, :], bt.words[None, :, :])
        pc = np.bitwise_count(x).sum(axis=2, dtype=np.int32)
        out[i0:i0 + row_block] = k - 2 * pc
    return out


def xnor_gemm(a: PackedMatrix, b: PackedMatrix) -> np.ndarray:
    """Integer product of +-1 matrices ``a[m,k] @ b[k,n]``, both row-packed."""
    if a.cols != b.rows:
        raise DimensionError(f"xnor_gemm inner dims differ: a is {a.rows}x{a.cols}, b is {b.rows}x{b.cols}")
    return xnor_gemm_t(a, transpose_packed(b))


def scaled_output(acc: np.ndarray, bt: PackedMatrix) -> np.ndarray:
    """Apply ``bt``'s per-output-channel scale to an integer accumulator."""
    if bt.scale is None:
        return acc.astype(np.float32)
    return acc.astype(np.float32) * bt.scale[None, :]
