"""Byte-exact tensor snapshots.

A snapshot is ``rank`` as u64 LE, ``rank`` dims as u64 LE, then the values as
f64 LE in row-major order. Archives bundle named snapshots with a JSON
metadata block and are what checkpoints are made of.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from typing import BinaryIO, Mapping

import numpy as np

from vtar.errors import FormatError

_U64 = struct.Struct("<Q")
ARCHIVE_MAGIC = b"VTARCKPT1"


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    header = _U64.pack(arr.ndim) + b"".join(_U64.pack(d) for d in arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


class Reader:
    """Cursor over a byte buffer that reports the offset of any short read."""

    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.pos = offset

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise FormatError(
                f"truncated {what}: expected {n} bytes, got {len(self.buf) - self.pos}",
                self.pos,
            )
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]

    def tensor(self, what: str = "tensor") -> np.ndarray:
        start = self.pos
        rank = self.u64(f"{what} rank")
        if rank > 16:
            raise FormatError(f"implausible {what} rank {rank}", start)
        dims = [self.u64(f"{what} dim") for _ in range(rank)]
        count = int(np.prod(dims)) if dims else 1
        raw = self.take(8 * count, f"{what} data")
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.buf)


def decode(buf: bytes) -> np.ndarray:
    r = Reader(buf)
    arr = r.tensor()
    if not r.exhausted:
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after snapshot", r.pos)
    return arr


def digest(arrays) -> str:
    """64-bit hex digest over the concatenated snapshots of ``arrays`` (in order)."""
    h = hashlib.blake2b(digest_size=8)
    for arr in arrays:
        h.update(encode(arr))
    return h.hexdigest()


def write_archive(path, tensors: Mapping[str, np.ndarray], meta: Mapping) -> None:
    out = io.BytesIO()
    out.write(ARCHIVE_MAGIC)
    blob = json.dumps(meta, sort_keys=True).encode()
    out.write(_U64.pack(len(blob)))
    out.write(blob)
    out.write(_U64.pack(len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        out.write(_U64.pack(len(raw)))
        out.write(raw)
        out.write(encode(arr))
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def read_archive(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_archive(buf)


def parse_archive(buf: bytes) -> tuple[dict, dict]:
    r = Reader(buf)
    if r.take(len(ARCHIVE_MAGIC), "magic") != ARCHIVE_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    n = r.u64("metadata length")
    start = r.pos
    try:
        meta = json.loads(r.take(n, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("metadata is not valid JSON", start) from None
    tensors = {}
    for _ in range(r.u64("tensor count")):
        name = r.take(r.u64("name length"), "name").decode()
        tensors[name] = r.tensor(name)
    if not r.exhausted:
        raise FormatError("trailing bytes after checkpoint", r.pos)
    return tensors, meta


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(encode(arr))
