"""Little-endian binary helpers shared by the checkpoint and volume formats."""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, TruncatedError

DTYPE_TAGS = {
    "f4": np.dtype("<f4"),
    "f8": np.dtype("<f8"),
    "u1": np.dtype("u1"),
    "i2": np.dtype("<i2"),
    "u2": np.dtype("<u2"),
    "i4": np.dtype("<i4"),
    "i8": np.dtype("<i8"),
}


def dtype_tag(dtype) -> str:
    dt = np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).itemsize > 1 else np.dtype(dtype)
    for tag, known in DTYPE_TAGS.items():
        if known == dt:
            return tag
    raise FormatError(f"unsupported dtype {dtype}")


def tag_dtype(tag: str) -> np.dtype:
    try:
        return DTYPE_TAGS[tag]
    except KeyError:
        raise FormatError(f"unknown dtype tag {tag!r}") from None


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


class Reader:
    """Cursor over a byte buffer; running past the end raises :class:`TruncatedError`."""

    def __init__(self, data: bytes, what: str = "file"):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedError(f"{self.what} truncated: needed {n} bytes at offset {self.pos}, "
                                 f"{len(self.data) - self.pos} available")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def remaining(self) -> int:
        return len(self.data) - self.pos


def finish(reader: Reader, start: int) -> None:
    """Check that exactly a CRC32 trailer follows, and that it matches ``data[start:pos]``."""
    end = reader.pos
    (stored,) = reader.unpack("<I")
    if reader.remaining():
        raise FormatError(f"{reader.what} has {reader.remaining()} unexpected trailing bytes")
    computed = crc32(reader.data[start:end])
    if computed != stored:
        raise ChecksumError(f"{reader.what} CRC32 mismatch (stored {stored:08x}, computed {computed:08x})")
