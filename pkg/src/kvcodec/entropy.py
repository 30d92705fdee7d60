"""Lossless byte-stream stage.

Frame layout (little-endian, no padding)::

    u8   codec id      0 = identity, 1 = deflate (raw RFC 1951 stream)
    u64  raw length
    ...  body
    u32  CRC-32 of everything before it
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass

from .errors import CorruptPayload, InvalidInput

_HEAD = struct.Struct("<BQ")
_TAIL = struct.Struct("<I")
FRAME_OVERHEAD = _HEAD.size + _TAIL.size


class CodecKind(enum.IntEnum):
    IDENTITY = 0
    DEFLATE = 1

    @classmethod
    def parse(cls, name: str) -> "CodecKind":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise InvalidInput(f"unknown lossless codec {name!r}") from None


@dataclass(frozen=True)
class LosslessCodec:
    kind: CodecKind = CodecKind.DEFLATE
    level: int = 6

    def __post_init__(self):
        object.__setattr__(self, "kind", CodecKind(self.kind))
        if not 0 <= self.level <= 9:
            raise InvalidInput(f"deflate level must be in 0..9, got {self.level}")

    def encode(self, payload: bytes) -> bytes:
        return encode(self, payload)


def encode(codec: LosslessCodec, payload: bytes) -> bytes:
    payload = bytes(payload)
    if codec.kind is CodecKind.DEFLATE:
        comp = zlib.compressobj(codec.level, zlib.DEFLATED, -15)
        body = comp.compress(payload) + comp.flush()
    else:
        body = payload
    head = _HEAD.pack(codec.kind, len(payload))
    return head + body + _TAIL.pack(zlib.crc32(head + body))


def decode(frame: bytes) -> bytes:
    frame = memoryview(frame)
    if len(frame) < FRAME_OVERHEAD:
        raise CorruptPayload(f"frame of {len(frame)} bytes is shorter than its header")
    kind, raw_len = _HEAD.unpack_from(frame, 0)
    body = frame[_HEAD.size : len(frame) - _TAIL.size]
    (crc,) = _TAIL.unpack_from(frame, len(frame) - _TAIL.size)
    if zlib.crc32(frame[: len(frame) - _TAIL.size]) != crc:
        raise CorruptPayload("frame checksum mismatch")
    if kind not in CodecKind._value2member_map_:
        raise CorruptPayload(f"unknown codec id {kind}")
    if kind == CodecKind.DEFLATE:
        d = zlib.decompressobj(-15)
        try:
            out = d.decompress(body, raw_len + 1) if raw_len else d.decompress(body)
        except zlib.error as exc:
            raise CorruptPayload(f"invalid deflate stream: {exc}") from exc
        if not d.eof:
            raise CorruptPayload("deflate stream incomplete")
    else:
        out = bytes(body)
    if len(out) != raw_len:
        raise CorruptPayload(f"decoded {len(out)} bytes, frame declares {raw_len}")
    return out


def frame_codec(frame: bytes) -> CodecKind:
    if len(frame) < 1 or frame[0] not in CodecKind._value2member_map_:
        raise CorruptPayload("not a lossless frame")
    return CodecKind(frame[0])
