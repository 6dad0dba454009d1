"""Length-prefixed big-endian byte codec used by wire messages and evidence."""

from __future__ import annotations

import struct

from .errors import P3Error


class MalformedBytes(P3Error):
    pass


class Writer:
    def __init__(self):
        self._buf = bytearray()

    def raw(self, data: bytes) -> "Writer":
        self._buf += data
        return self

    def u8(self, v: int) -> "Writer":
        self._buf += struct.pack(">B", v)
        return self

    def u16(self, v: int) -> "Writer":
        self._buf += struct.pack(">H", v)
        return self

    def u32(self, v: int) -> "Writer":
        self._buf += struct.pack(">I", v)
        return self

    def u64(self, v: int) -> "Writer":
        self._buf += struct.pack(">Q", v)
        return self

    def bytes16(self, data: bytes) -> "Writer":
        return self.u16(len(data)).raw(data)

    def bytes32(self, data: bytes) -> "Writer":
        return self.u32(len(data)).raw(data)

    def string(self, s: str) -> "Writer":
        return self.bytes16(s.encode("utf-8"))

    def getvalue(self) -> bytes:
        return bytes(self._buf)


class Reader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def raw(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise MalformedBytes("truncated input")
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self.raw(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.raw(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.raw(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.raw(8))[0]

    def bytes16(self) -> bytes:
        return self.raw(self.u16())

    def bytes32(self) -> bytes:
        return self.raw(self.u32())

    def string(self) -> str:
        return self.bytes16().decode("utf-8")

    def expect_done(self) -> None:
        if self._pos != len(self._data):
            raise MalformedBytes("trailing bytes")
