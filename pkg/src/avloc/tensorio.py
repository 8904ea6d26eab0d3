"""Binary tensor files and checkpoints.

Single tensor (TSR1):

    magic    4 bytes  b"TSR1"
    dtype    u8       0 = real32, 1 = real64
    rank     u8
    extents  rank x u32, little endian
    payload  row-major scalars, little endian

Checkpoint: u32 entry count, then per entry a u32 name byte length, the UTF-8
name, a u64 blob length, and the TSR1 blob. Entries are written sorted by
name so identical contents always produce identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"TSR1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """Raised on malformed or truncated tensor files."""


def tensor_to_bytes(arr) -> bytes:
    if isinstance(arr, Tensor):
        arr = arr.data
    arr = np.asarray(arr)
    if arr.ndim > 0:
        arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise TypeError(f"TSR1 stores real32/real64 tensors, got dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError(f"TSR1 rank limit is 255, got {arr.ndim}")
    for ext in arr.shape:
        if ext >= 2**32:
            raise ValueError(f"TSR1 extent limit is 2^32-1, got {ext}")
    head = MAGIC + struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    return head + payload


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 6:
        raise FormatError(f"tensor blob truncated: {len(blob)} bytes")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    offset = 6
    if len(blob) < offset + 4 * rank:
        raise FormatError("tensor blob truncated in extents")
    shape = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = offset + count * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(f"tensor blob size {len(blob)} != expected {expected} for shape {tuple(shape)}")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def checkpoint_to_bytes(named: dict) -> bytes:
    parts = [struct.pack("<I", len(named))]
    for name in sorted(named):
        raw = name.encode("utf-8")
        blob = tensor_to_bytes(named[name])
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def checkpoint_from_bytes(blob: bytes) -> dict:
    if len(blob) < 4:
        raise FormatError("checkpoint truncated: missing entry count")
    (count,) = struct.unpack_from("<I", blob, 0)
    offset = 4
    out: dict = {}
    for _ in range(count):
        if len(blob) < offset + 4:
            raise FormatError("checkpoint truncated in name length")
        (nlen,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if len(blob) < offset + nlen + 8:
            raise FormatError("checkpoint truncated in entry")
        name = blob[offset : offset + nlen].decode("utf-8")
        offset += nlen
        (blen,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        if len(blob) < offset + blen:
            raise FormatError(f"checkpoint truncated in tensor {name!r}")
        out[name] = tensor_from_bytes(blob[offset : offset + blen])
        offset += blen
    if offset != len(blob):
        raise FormatError(f"checkpoint has {len(blob) - offset} trailing bytes")
    return out


def save_checkpoint(path, named: dict) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(named))


def load_checkpoint(path) -> dict:
    return checkpoint_from_bytes(Path(path).read_bytes())
