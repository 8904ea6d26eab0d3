"""Binary PGM (P5) images for similarity maps and tri-map masks.

Value mappings are affine and documented here once:

    similarity  [-1, 1] -> [0, 255]   (0.0 maps to 128)
    unit values [0, 1]  -> [0, 255]
    binary mask {0, 1}  -> {0, 255}
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PgmError(ValueError):
    """Malformed PGM header or payload."""


def write_pgm(path, values: np.ndarray) -> None:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"PGM wants a rank-2 array, got rank {arr.ndim}")
    if arr.dtype != np.uint8:
        raise TypeError(f"PGM payload must be uint8, got {arr.dtype}")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def _tokens(blob: bytes):
    # header tokenizer: whitespace-separated, '#' starts a comment line
    i = 0
    while True:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if i < len(blob) and blob[i : i + 1] == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(blob) and not blob[i : i + 1].isspace():
            i += 1
        if start == i:
            raise PgmError("truncated PGM header")
        yield blob[start:i], i


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields = []
    end = 0
    for token, pos in _tokens(blob):
        fields.append(token)
        end = pos
        if len(fields) == 4:
            break
    if len(fields) < 4:
        raise PgmError(f"{path}: incomplete PGM header")
    magic, width, height, maxval = fields
    if magic != b"P5":
        raise PgmError(f"{path}: not a binary PGM (magic {magic!r})")
    try:
        w, h, mv = int(width), int(height), int(maxval)
    except ValueError:
        raise PgmError(f"{path}: non-numeric PGM header fields")
    if mv != 255:
        raise PgmError(f"{path}: unsupported maxval {mv}")
    payload = blob[end + 1 :]
    if len(payload) != w * h:
        raise PgmError(f"{path}: payload is {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def signed_to_bytes(values: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255]; out-of-range inputs are clipped first."""
    x = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


def unit_to_bytes(values: np.ndarray) -> np.ndarray:
    """[0, 1] -> [0, 255]; out-of-range inputs are clipped first."""
    x = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.rint(x * 255.0).astype(np.uint8)


def bytes_to_unit(values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) / 255.0
