"""Little-endian binary readers/writers with a trailing CRC32.

All artifact files (datasets, prediction caches, checkpoints) share the same
skeleton: magic bytes, a u16 format version, a body, and a CRC32 of every
preceding byte. Floats are IEEE-754 doubles, integers are unsigned
little-endian.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import ChecksumError, MalformedFileError


class PayloadWriter:
    """Accumulates a file body and appends the CRC32 on finish."""

    def __init__(self, magic: bytes, version: int):
        self._buf = bytearray()
        self._buf += magic
        self.u16(version)

    def u8(self, value: int):
        self._buf += struct.pack("<B", value)

    def u16(self, value: int):
        self._buf += struct.pack("<H", value)

    def u32(self, value: int):
        self._buf += struct.pack("<I", value)

    def u64(self, value: int):
        self._buf += struct.pack("<Q", value)

    def f64_array(self, arr: np.ndarray):
        self._buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()

    def u32_array(self, arr: np.ndarray):
        self._buf += np.ascontiguousarray(arr, dtype="<u4").tobytes()

    def text(self, text: str):
        """Length-prefixed (u32) UTF-8 blob."""
        raw = text.encode("utf-8")
        self.u32(len(raw))
        self._buf += raw

    def body_crc(self) -> int:
        return zlib.crc32(bytes(self._buf)) & 0xFFFFFFFF

    def finish(self) -> bytes:
        crc = self.body_crc()
        return bytes(self._buf) + struct.pack("<I", crc)


class PayloadReader:
    """Walks a file body after validating magic, version, and trailing CRC."""

    def __init__(self, data: bytes, magic: bytes, version: int, path=""):
        self._path = str(path)
        if len(data) < len(magic) + 6:
            raise MalformedFileError(f"{self._path}: truncated file")
        if data[: len(magic)] != magic:
            raise MalformedFileError(f"{self._path}: bad magic bytes")
        body, stored = data[:-4], struct.unpack("<I", data[-4:])[0]
        actual = zlib.crc32(body) & 0xFFFFFFFF
        if actual != stored:
            raise ChecksumError(
                f"{self._path}: CRC mismatch (stored {stored:#010x}, computed {actual:#010x})"
            )
        self._body = body
        self._pos = len(magic)
        got = self.u16()
        if got != version:
            raise MalformedFileError(
                f"{self._path}: unsupported format version {got} (expected {version})"
            )

    def _take(self, nbytes: int) -> bytes:
        end = self._pos + nbytes
        if end > len(self._body):
            raise MalformedFileError(f"{self._path}: truncated file")
        chunk = self._body[self._pos : end]
        self._pos = end
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 0
        raw = self._take(8 * n)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    def u32_array(self, count: int) -> np.ndarray:
        raw = self._take(4 * count)
        return np.frombuffer(raw, dtype="<u4").astype(np.int64)

    def text(self) -> str:
        n = self.u32()
        return self._take(n).decode("utf-8")

    def expect_end(self):
        if self._pos != len(self._body):
            raise MalformedFileError(f"{self._path}: trailing bytes after payload")
