import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kvcodec.entropy import FRAME_OVERHEAD, CodecKind, LosslessCodec, decode, encode, frame_codec
from kvcodec.errors import CorruptPayload, InvalidInput

CODECS = [LosslessCodec(CodecKind.IDENTITY), LosslessCodec(CodecKind.DEFLATE), LosslessCodec(CodecKind.DEFLATE, 9)]


@given(st.binary(max_size=2000), st.sampled_from(CODECS))
def test_round_trip(payload, codec):
    frame = encode(codec, payload)
    assert decode(frame) == payload
    assert frame_codec(frame) is codec.kind


def test_deflate_body_is_raw_rfc1951():
    payload = b"abcabcabc" * 100
    frame = encode(LosslessCodec(), payload)
    body = frame[9:-4]
    assert zlib.decompress(body, -15) == payload
    assert len(frame) < len(payload)


def test_identity_layout():
    frame = encode(LosslessCodec(CodecKind.IDENTITY), b"xyz")
    assert frame[:9] == bytes([0, 3, 0, 0, 0, 0, 0, 0, 0])
    assert frame[9:12] == b"xyz"
    assert frame[12:] == zlib.crc32(frame[:12]).to_bytes(4, "little")
    assert len(frame) == 3 + FRAME_OVERHEAD


@given(st.binary(min_size=1, max_size=300), st.sampled_from(CODECS), st.data())
def test_single_byte_corruption_rejected(payload, codec, data):
    frame = bytearray(encode(codec, payload))
    i = data.draw(st.integers(0, len(frame) - 1))
    frame[i] ^= data.draw(st.integers(1, 255))
    with pytest.raises(CorruptPayload):
        decode(bytes(frame))


@given(st.binary(max_size=300), st.sampled_from(CODECS), st.data())
def test_truncation_rejected(payload, codec, data):
    frame = encode(codec, payload)
    cut = data.draw(st.integers(0, len(frame) - 1))
    with pytest.raises(CorruptPayload):
        decode(frame[:cut])


def test_codec_parsing_and_validation():
    assert CodecKind.parse("Deflate") is CodecKind.DEFLATE
    with pytest.raises(InvalidInput):
        CodecKind.parse("zstd")
    with pytest.raises(InvalidInput):
        LosslessCodec(level=10)
    with pytest.raises(CorruptPayload):
        frame_codec(b"\x07")


def test_repeated_pattern_collapses():
    data = bytes(range(16)) * (1 << 16)
    assert len(encode(LosslessCodec(CodecKind.DEFLATE), data)) < len(data) / 10


def test_random_bytes_do_not_shrink():
    data = np.random.default_rng(3).bytes(1 << 16)
    assert len(encode(LosslessCodec(CodecKind.DEFLATE), data)) >= len(data)


def test_random_lengths_round_trip():
    g = np.random.default_rng(4)
    for _ in range(1000):
        data = g.bytes(int(g.integers(0, 65537)))
        kind = CodecKind(int(g.integers(0, 2)))
        assert decode(encode(LosslessCodec(kind), data)) == data


def test_unknown_codec_id_with_valid_crc():
    head = struct.pack("<BQ", 7, 3)
    frame = head + b"abc" + struct.pack("<I", zlib.crc32(head + b"abc"))
    with pytest.raises(CorruptPayload, match="codec"):
        decode(frame)
