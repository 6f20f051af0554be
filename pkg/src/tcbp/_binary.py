"""Shared binary-format helpers: CRC64 checksums and little-endian field IO."""

import struct

# CRC-64/XZ (reflected ECMA-182 polynomial), table-driven.
_CRC64_POLY = 0xC96C5795D7870F42
_CRC64_TABLE = []
for _byte in range(256):
    _crc = _byte
    for _ in range(8):
        if _crc & 1:
            _crc = (_crc >> 1) ^ _CRC64_POLY
        else:
            _crc >>= 1
    _CRC64_TABLE.append(_crc)


def crc64(data: bytes, crc: int = 0) -> int:
    """CRC-64/XZ of ``data``; pass a previous result as ``crc`` to continue a stream."""
    crc ^= 0xFFFFFFFFFFFFFFFF
    for b in data:
        crc = _CRC64_TABLE[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


class Writer:
    """Accumulates little-endian fields and appends a trailing CRC64 on demand."""

    def __init__(self):
        self._chunks = []

    def bytes_(self, raw: bytes):
        self._chunks.append(raw)

    def u8(self, v: int):
        self._chunks.append(struct.pack("<B", v))

    def u32(self, v: int):
        self._chunks.append(struct.pack("<I", v))

    def u64(self, v: int):
        self._chunks.append(struct.pack("<Q", v))

    def getvalue(self, with_crc: bool = False) -> bytes:
        blob = b"".join(self._chunks)
        if with_crc:
            blob += struct.pack("<Q", crc64(blob))
        return blob


class Reader:
    """Sequential little-endian field reader over an in-memory blob."""

    def __init__(self, blob: bytes):
        self._blob = blob
        self._pos = 0

    def bytes_(self, n: int) -> bytes:
        if self._pos + n > len(self._blob):
            raise ValueError("truncated blob")
        out = self._blob[self._pos:self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.bytes_(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.bytes_(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.bytes_(8))[0]

    @property
    def pos(self) -> int:
        return self._pos

    def remaining(self) -> int:
        return len(self._blob) - self._pos


def check_trailing_crc(blob: bytes, what: str = "blob") -> bytes:
    """Verify the final 8 bytes are the CRC64 of the rest; return the payload."""
    if len(blob) < 8:
        raise ValueError(f"{what}: too short to hold a checksum")
    payload, stored = blob[:-8], struct.unpack("<Q", blob[-8:])[0]
    actual = crc64(payload)
    if stored != actual:
        raise ValueError(f"{what}: CRC64 mismatch (stored {stored:#018x}, computed {actual:#018x})")
    return payload
