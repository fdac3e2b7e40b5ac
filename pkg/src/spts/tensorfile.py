"""Named float32 tensor container.

Layout::

    [8 bytes]  little-endian uint64 header length H
    [H bytes]  UTF-8 text, one line per tensor: ``name f32 rows cols offset``
    [payload]  little-endian float32 tensors, concatenated in header order

Offsets are relative to the start of the payload. Vectors are stored as
``1 x n`` matrices.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import FormatError

_LE_F32 = np.dtype("<f4")


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    lines = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise FormatError(f"invalid tensor name {name!r}")
        a = np.asarray(arr)
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2:
            raise FormatError(f"{name}: only 1-D and 2-D tensors are supported")
        data = np.ascontiguousarray(a, dtype=_LE_F32).tobytes()
        lines.append(f"{name} f32 {a.shape[0]} {a.shape[1]} {offset}\n")
        chunks.append(data)
        offset += len(data)
    header = "".join(lines).encode("utf-8")
    return struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 8:
        raise FormatError("file shorter than the header-length prefix")
    (hlen,) = struct.unpack_from("<Q", blob, 0)
    if 8 + hlen > len(blob):
        raise FormatError("header length exceeds file size")
    try:
        text = blob[8 : 8 + hlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("header is not UTF-8") from exc
    payload = memoryview(blob)[8 + hlen :]
    out: dict[str, np.ndarray] = {}
    expected = 0
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise FormatError(f"header line {lineno}: expected 5 fields, got {len(parts)}")
        name, dtype, rows, cols, off = parts
        if dtype != "f32":
            raise FormatError(f"{name}: unsupported dtype {dtype}")
        try:
            rows_i, cols_i, off_i = int(rows), int(cols), int(off)
        except ValueError as exc:
            raise FormatError(f"header line {lineno}: non-integer field") from exc
        if rows_i < 0 or cols_i < 0:
            raise FormatError(f"{name}: negative shape")
        if off_i != expected:
            raise FormatError(f"{name}: offset {off_i} overlaps or leaves a gap (expected {expected})")
        if name in out:
            raise FormatError(f"duplicate tensor {name}")
        nbytes = rows_i * cols_i * 4
        if off_i + nbytes > len(payload):
            raise FormatError(f"{name}: payload truncated")
        arr = np.frombuffer(payload[off_i : off_i + nbytes], dtype=_LE_F32)
        out[name] = arr.reshape(rows_i, cols_i).astype(np.float32)
        expected = off_i + nbytes
    if expected != len(payload):
        raise FormatError(f"payload has {len(payload) - expected} trailing bytes")
    return out


def write_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(tensors))


def read_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())
