"""Versioned little-endian record files.

Every binary artifact (feature cache, checkpoints, back-end models) starts
with a 16-byte header::

    magic   4 bytes   ASCII tag identifying the artifact kind
    version uint32    format version
    a       uint32    kind-specific (rows / record count)
    b       uint32    kind-specific (cols / dimension)
"""

import struct
from typing import BinaryIO

import numpy as np

from kws.errors import DecodeError

HEADER = struct.Struct("<4sIII")


def write_header(fh: BinaryIO, magic: bytes, version: int, a: int, b: int) -> None:
    fh.write(HEADER.pack(magic, version, a, b))


def read_header(fh: BinaryIO, magic: bytes, version: int) -> tuple[int, int]:
    """Read and check a header, returning its two kind-specific fields.

    Raises:
        DecodeError: on a short read, wrong magic or unsupported version.
    """
    raw = fh.read(HEADER.size)
    if len(raw) != HEADER.size:
        raise DecodeError("truncated header")
    got_magic, got_version, a, b = HEADER.unpack(raw)
    if got_magic != magic:
        raise DecodeError(f"bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise DecodeError(f"unsupported version {got_version} for {magic!r}")
    return a, b


def write_array(fh: BinaryIO, values: np.ndarray, dtype: str) -> None:
    fh.write(np.ascontiguousarray(values, dtype=dtype).tobytes())


def read_array(fh: BinaryIO, count: int, dtype: str) -> np.ndarray:
    item = np.dtype(dtype).itemsize
    raw = fh.read(count * item)
    if len(raw) != count * item:
        raise DecodeError(f"expected {count} values, file is truncated")
    return np.frombuffer(raw, dtype=dtype).copy()


def write_string(fh: BinaryIO, text: str) -> None:
    data = text.encode("utf-8")
    fh.write(struct.pack("<H", len(data)))
    fh.write(data)


def read_string(fh: BinaryIO) -> str:
    raw = fh.read(2)
    if len(raw) != 2:
        raise DecodeError("truncated string length")
    (size,) = struct.unpack("<H", raw)
    data = fh.read(size)
    if len(data) != size:
        raise DecodeError("truncated string")
    return data.decode("utf-8")


def write_u32(fh: BinaryIO, *values: int) -> None:
    fh.write(struct.pack(f"<{len(values)}I", *values))


def read_u32(fh: BinaryIO, count: int = 1) -> tuple[int, ...]:
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise DecodeError("truncated integer field")
    return struct.unpack(f"<{count}I", raw)
