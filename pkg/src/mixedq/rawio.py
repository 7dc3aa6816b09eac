"""Raw tensor files.

Layout: ``b"MXQT"``, a version byte, a u8 rank, ``rank`` little-endian u32
dimensions, then the elements as little-endian float32 in row-major order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"MXQT"
VERSION = 1


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr, dtype="<f4", order="C")
    if arr.ndim > 255:
        raise ValueError("rank too large")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns it and the end offset."""
    view = memoryview(buf)
    if len(view) < offset + 6 or bytes(view[offset:offset + 4]) != MAGIC:
        raise ParseError("bad magic: not an MXQT tensor")
    version, rank = struct.unpack_from("<BB", view, offset + 4)
    if version != VERSION:
        raise ParseError(f"unsupported MXQT version {version}")
    pos = offset + 6
    if len(view) < pos + 4 * rank:
        raise ParseError("truncated MXQT header")
    shape = struct.unpack_from(f"<{rank}I", view, pos)
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = 4 * count
    if len(view) < pos + nbytes:
        raise ParseError(f"truncated MXQT payload: need {nbytes} bytes")
    arr = np.frombuffer(view[pos:pos + nbytes], dtype="<f4").reshape(shape).copy()
    return arr, pos + nbytes


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    arr, end = decode_tensor(data)
    if end != len(data):
        raise ParseError(f"{path}: {len(data) - end} trailing bytes after tensor")
    return arr


def write_tensors(fh: io.BufferedIOBase, arrays) -> list[tuple[int, int]]:
    """Append tensors to an open binary file; returns (offset, length) pairs."""
    spans = []
    for arr in arrays:
        blob = encode_tensor(arr)
        spans.append((fh.tell(), len(blob)))
        fh.write(blob)
    return spans
