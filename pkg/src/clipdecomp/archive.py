"""Named-tensor archive (``.nta``) reader and writer.

Byte layout, all little-endian::

    b"NTA1"                      magic
    u32                          entry count
    repeated per entry:
        u16                      name length in bytes
        bytes                    UTF-8 name
        u8                       dtype (0 = float32, 1 = float64)
        u8                       ndim
        ndim x u64               dims
    payloads                     row-major, concatenated in entry order

The payload sizes declared by the headers must account for every remaining
byte of the file.
"""

from __future__ import annotations

import os
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

MAGIC = b"NTA1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    """Malformed archive or input file. ``offset`` is the byte position, if known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def encode_archive(tensors: Mapping[str, np.ndarray]) -> bytes:
    header = bytearray(MAGIC)
    header += struct.pack("<I", len(tensors))
    payloads = []
    for name, value in tensors.items():
        arr = np.asarray(value)
        if arr.dtype not in DTYPE_CODES:
            if np.issubdtype(arr.dtype, np.floating) or np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
                arr = arr.astype(np.float32)
            else:
                raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} has too many dimensions")
        header += struct.pack("<H", len(raw_name)) + raw_name
        header += struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim)
        header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payloads.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return bytes(header) + b"".join(payloads)


def decode_archive(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 8:
        raise FormatError("file too short for header", 0)
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    entries = []
    seen = set()
    for _ in range(count):
        if pos + 2 > len(buf):
            raise FormatError("truncated entry header", pos)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + nlen + 2 > len(buf):
            raise FormatError("truncated entry name", pos)
        try:
            name = buf[pos : pos + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("entry name is not valid UTF-8", pos) from exc
        if name in seen:
            raise FormatError(f"duplicate tensor name {name!r}", pos)
        seen.add(name)
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        if code not in DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}", pos)
        pos += 2
        if pos + 8 * ndim > len(buf):
            raise FormatError(f"truncated dims for {name!r}", pos)
        dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        entries.append((name, DTYPES[code], dims))

    declared = sum(int(np.prod(dims, dtype=np.int64)) * dt.itemsize for _, dt, dims in entries)
    if pos + declared != len(buf):
        raise FormatError(
            f"declared payload size {declared} does not match remaining {len(buf) - pos} bytes", pos
        )
    out = {}
    for name, dt, dims in entries:
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos)
        out[name] = arr.reshape(dims).astype(dt.newbyteorder("="))
        pos += nbytes
    return out


def save_archive(tensors: Mapping[str, np.ndarray], path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_archive(tensors))


def load_archive(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_archive(Path(path).read_bytes())
