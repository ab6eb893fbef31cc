# ddprune/codec.py
"""
Little-endian binary helpers shared by the DDS1 / DDD1 / DDTB file formats,
plus atomic file writes and content digests.
"""
from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .errors import FormatError, TruncatedFileError

DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
TAG_FOR_DTYPE = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def dtype_tag(dtype: np.dtype) -> int:
    try:
        return TAG_FOR_DTYPE[np.dtype(dtype)]
    except KeyError:
        raise FormatError(f"dtype_tag: unsupported dtype {dtype}") from None


def dtype_for_tag(tag: int) -> np.dtype:
    try:
        return DTYPE_TAGS[int(tag)]
    except KeyError:
        raise FormatError(f"dtype_for_tag: unknown dtype tag {tag}") from None


def pack(fmt: str, *values) -> bytes:
    return struct.pack("<" + fmt, *values)


def pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return pack("H", len(raw)) + raw


class Reader:
    """Sequential reader over a binary stream that reports the offset of any short read."""

    def __init__(self, fh: BinaryIO, what: str) -> None:
        self.fh = fh
        self.what = what
        self.offset = 0

    def read(self, n: int) -> bytes:
        buf = self.fh.read(n)
        if len(buf) != n:
            raise TruncatedFileError(f"{self.what}: expected {n} bytes, got {len(buf)}", self.offset + len(buf))
        self.offset += n
        return buf

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.read(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def read_str(self) -> str:
        n = self.unpack("H")
        return self.read(n).decode("utf-8")

    def read_array(self, dtype: np.dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype).newbyteorder("<")
        raw = self.read(dtype.itemsize * int(count))
        return np.frombuffer(raw, dtype=dtype, count=int(count)).copy()

    def skip(self, n: int) -> None:
        self.fh.seek(n, os.SEEK_CUR)
        self.offset += n

    def expect_magic(self, magic: bytes, version: int) -> None:
        got = self.fh.read(len(magic))
        if got != magic:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {magic!r}")
        self.offset += len(magic)
        ver = self.unpack("H")
        if ver != version:
            raise FormatError(f"{self.what}: unsupported version {ver}, expected {version}")

    def expect_end(self) -> None:
        extra = self.fh.read(1)
        if extra:
            raise FormatError(f"{self.what}: trailing bytes after payload at offset {self.offset}")


def array_bytes(arr: np.ndarray, dtype: np.dtype) -> bytes:
    return np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


def atomic_write_bytes(path: str | Path, chunks: bytes | Iterable[bytes]) -> Path:
    """Write to a sibling temp file, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(chunks, (bytes, bytearray)):
        chunks = [bytes(chunks)]
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: str | Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def digest(*parts: bytes | str | np.ndarray, length: int = 16) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(str(p.dtype).encode())
            h.update(str(p.shape).encode())
            p = np.ascontiguousarray(p).tobytes()
        elif isinstance(p, str):
            p = p.encode("utf-8")
        h.update(len(p).to_bytes(8, "little"))
        h.update(p)
    return h.hexdigest()[:length]
