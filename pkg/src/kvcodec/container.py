"""On-disk formats. All little-endian, fixed field order, no padding.

Byte-level layouts are documented in ``docs/formats.md``; the struct
definitions below are the source of truth.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .allocator import AllocationPlan
from .errors import (
    BadMagic,
    ChecksumMismatch,
    CorruptPayload,
    InvalidInput,
    TruncatedFile,
    UnsupportedVersion,
)
from .linalg import PcaModel, orthonormalize_columns
from .quant import ElementType
from .rope import HALF_SPLIT, INTERLEAVED, RopeConfig

ARTIFACT_MAGIC = b"KVTA"
CACHE_MAGIC = b"KVTC"
TENSOR_MAGIC = b"KVTR"
PLAN_MAGIC = b"KVTP"
FORMAT_VERSION = 1

STREAMS = ("key", "value")
_PAIRING_IDS = {INTERLEAVED: 0, HALF_SPLIT: 1}
_PAIRING_NAMES = {v: k for k, v in _PAIRING_IDS.items()}

DTYPE_IDS = {np.dtype(np.float16): 1, np.dtype(np.float32): 2, np.dtype(np.float64): 3}
DTYPES = {v: k for k, v in DTYPE_IDS.items()}

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in bytes(data):
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


class _Reader:
    """Bounds-checked cursor; running past the end is a truncated file."""

    def __init__(self, buf, what: str):
        self.buf = memoryview(buf)
        self.pos = 0
        self.what = what

    def take(self, n: int, section: str) -> memoryview:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedFile(f"{self.what}: truncated in {section}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, section: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size, section))


def _check_magic_version(r: _Reader, magic: bytes, what: str) -> None:
    got = bytes(r.take(4, "magic"))
    if got != magic:
        raise BadMagic(f"{what}: expected magic {magic!r}, found {got!r}")
    (version,) = r.unpack("H", "version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{what}: version {version} not supported (expected {FORMAT_VERSION})")


_ROPE_SIZE = struct.calcsize("<BIddB")


def _pack_rope(rope: RopeConfig | None) -> bytes:
    if rope is None:
        return struct.pack("<BIddB", 0, 0, 0.0, 0.0, 0)
    return struct.pack("<BIddB", 1, rope.head_dim, rope.base, rope.scaling, _PAIRING_IDS[rope.pairing])


def _unpack_rope(r: _Reader) -> RopeConfig | None:
    has, head_dim, base, scaling, pairing = r.unpack("BIddB", "rope metadata")
    if not has:
        return None
    if pairing not in _PAIRING_NAMES:
        raise CorruptPayload(f"unknown RoPE pairing id {pairing}")
    try:
        return RopeConfig(head_dim, base, scaling, _PAIRING_NAMES[pairing])
    except InvalidInput as exc:
        raise CorruptPayload(f"invalid RoPE metadata: {exc}") from exc


# ---------------------------------------------------------------- artifacts


@dataclass(frozen=True, eq=False)
class CalibrationArtifact:
    """One stream's calibration result as stored: binary16 mean and basis.

    ``model`` is derived from the stored values, with the basis
    re-orthonormalized after widening, so an artifact built in memory and one
    read from disk compress identically.
    """

    stream: str
    mean_half: np.ndarray
    basis_half: np.ndarray
    sigma32: np.ndarray
    sample_count: int
    rope: RopeConfig | None = None
    seed: int = 0
    layer_start: int = 0
    layer_count: int = 0

    def __post_init__(self):
        if self.stream not in STREAMS:
            raise InvalidInput(f"stream must be one of {STREAMS}")
        mean = np.ascontiguousarray(self.mean_half, dtype=np.float16).reshape(-1)
        basis = np.asarray(self.basis_half, dtype=np.float16).reshape(mean.shape[0], -1)
        sigma = np.ascontiguousarray(self.sigma32, dtype=np.float32).reshape(-1)
        if sigma.shape[0] != basis.shape[1]:
            raise InvalidInput("sigma length must equal rank")
        for a in (mean, basis, sigma):
            a.setflags(write=False)
        object.__setattr__(self, "mean_half", mean)
        object.__setattr__(self, "basis_half", basis)
        object.__setattr__(self, "sigma32", sigma)

    @classmethod
    def from_model(
        cls,
        model: PcaModel,
        stream: str,
        rope: RopeConfig | None = None,
        seed: int = 0,
        layer_start: int = 0,
        layer_count: int = 0,
    ) -> "CalibrationArtifact":
        with np.errstate(over="ignore"):
            mean = model.mean.astype(np.float16)
            basis = model.basis.astype(np.float16)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(basis))):
            raise InvalidInput("model mean or basis overflows binary16")
        return cls(stream, mean, basis, model.sigma.astype(np.float32), model.sample_count,
                   rope, seed, layer_start, layer_count)

    @property
    def feature_count(self) -> int:
        return self.basis_half.shape[0]

    @property
    def rank(self) -> int:
        return self.basis_half.shape[1]

    @cached_property
    def model(self) -> PcaModel:
        basis = orthonormalize_columns(self.basis_half.astype(np.float64))
        return PcaModel(self.mean_half.astype(np.float64), basis,
                        self.sigma32.astype(np.float64), self.sample_count)

    @cached_property
    def _encoded(self) -> bytes:
        return serialize_artifact(self)

    @property
    def fingerprint(self) -> int:
        (fp,) = struct.unpack_from("<Q", self._encoded, len(self._encoded) - 8)
        return fp

    def to_bytes(self) -> bytes:
        return self._encoded

    def __eq__(self, other):
        if not isinstance(other, CalibrationArtifact):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    __hash__ = None


_ART_HEAD = struct.Struct("<4sHBIII")
_ART_META = struct.Struct("<QII")


def serialize_artifact(a: CalibrationArtifact) -> bytes:
    parts = [
        _ART_HEAD.pack(ARTIFACT_MAGIC, FORMAT_VERSION, STREAMS.index(a.stream),
                       a.feature_count, a.rank, a.sample_count),
        _pack_rope(a.rope),
        _ART_META.pack(a.seed, a.layer_start, a.layer_count),
        a.mean_half.astype("<f2").tobytes(),
        # column-major: each principal direction is contiguous
        np.asarray(a.basis_half, dtype="<f2").tobytes(order="F"),
        a.sigma32.astype("<f4").tobytes(),
    ]
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def artifact_size(feature_count: int, rank: int) -> int:
    """Serialized artifact length in bytes, without building one."""
    fixed = _ART_HEAD.size + _ROPE_SIZE + _ART_META.size + 8
    return fixed + 2 * feature_count + 2 * feature_count * rank + 4 * rank


def parse_artifact(buf) -> CalibrationArtifact:
    r = _Reader(buf, "artifact")
    _check_magic_version(r, ARTIFACT_MAGIC, "artifact")
    stream_id, p, rank, n = r.unpack("BIII", "header")
    rope = _unpack_rope(r)
    seed, layer_start, layer_count = r.unpack("QII", "fit metadata")
    mean = np.frombuffer(r.take(2 * p, "mean"), dtype="<f2")
    basis = np.frombuffer(r.take(2 * p * rank, "basis"), dtype="<f2").reshape((p, rank), order="F")
    sigma = np.frombuffer(r.take(4 * rank, "sigma"), dtype="<f4")
    body_end = r.pos
    (fp,) = r.unpack("Q", "fingerprint")
    if r.pos != len(r.buf):
        raise CorruptPayload(f"artifact: {len(r.buf) - r.pos} trailing bytes")
    if fnv1a64(r.buf[:body_end]) != fp:
        raise ChecksumMismatch("artifact: fingerprint does not match contents")
    if stream_id >= len(STREAMS):
        raise CorruptPayload(f"artifact: unknown stream id {stream_id}")
    return CalibrationArtifact(STREAMS[stream_id], mean, basis, sigma, n, rope, seed, layer_start, layer_count)


# ---------------------------------------------------------------- plans


def serialize_plan(plan: AllocationPlan) -> bytes:
    head = struct.pack(
        "<4sHIIQdI",
        PLAN_MAGIC,
        FORMAT_VERSION,
        plan.components,
        plan.budget_bits,
        plan.artifact_fingerprint,
        plan.expected_error,
        len(plan.groups),
    )
    groups = b"".join(struct.pack("<IB", size, int(et)) for size, et in plan.groups)
    body = head + groups
    return body + struct.pack("<I", zlib.crc32(body))


def parse_plan(buf) -> AllocationPlan:
    r = _Reader(buf, "plan")
    _check_magic_version(r, PLAN_MAGIC, "plan")
    components, budget, fp, expected, count = r.unpack("IIQdI", "header")
    raw = r.take(5 * count, "groups")
    body_end = r.pos
    (crc,) = r.unpack("I", "checksum")
    if r.pos != len(r.buf):
        raise CorruptPayload(f"plan: {len(r.buf) - r.pos} trailing bytes")
    if zlib.crc32(r.buf[:body_end]) != crc:
        raise ChecksumMismatch("plan: checksum mismatch")
    groups = []
    for k in range(count):
        size, et = struct.unpack_from("<IB", raw, 5 * k)
        if et not in ElementType._value2member_map_:
            raise CorruptPayload(f"plan: unknown element type id {et}")
        groups.append((size, ElementType(et)))
    try:
        return AllocationPlan(tuple(groups), components, expected, budget, fp)
    except InvalidInput as exc:
        raise CorruptPayload(f"plan: {exc}") from exc


# ---------------------------------------------------------------- raw tensors


def serialize_tensor(array) -> bytes:
    a = np.asarray(array)
    if a.dtype not in DTYPE_IDS:
        raise InvalidInput(f"unsupported tensor dtype {a.dtype}")
    head = struct.pack("<4sHI", TENSOR_MAGIC, FORMAT_VERSION, a.ndim)
    dims = struct.pack(f"<{a.ndim}Q", *a.shape)
    body = head + dims + struct.pack("<B", DTYPE_IDS[a.dtype]) + a.astype(a.dtype.newbyteorder("<")).tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def parse_tensor(buf) -> np.ndarray:
    r = _Reader(buf, "tensor")
    _check_magic_version(r, TENSOR_MAGIC, "tensor")
    (ndim,) = r.unpack("I", "header")
    if ndim > 16:
        raise CorruptPayload(f"tensor: implausible rank {ndim}")
    dims = r.unpack(f"{ndim}Q", "dims")
    (dtype_id,) = r.unpack("B", "element type")
    if dtype_id not in DTYPES:
        raise CorruptPayload(f"tensor: unknown element type id {dtype_id}")
    dtype = DTYPES[dtype_id].newbyteorder("<")
    count = int(np.prod(dims, dtype=np.uint64)) if ndim else 1
    payload = r.take(count * dtype.itemsize, "payload")
    body_end = r.pos
    (crc,) = r.unpack("I", "checksum")
    if r.pos != len(r.buf):
        raise CorruptPayload(f"tensor: {len(r.buf) - r.pos} trailing bytes")
    if zlib.crc32(r.buf[:body_end]) != crc:
        raise ChecksumMismatch("tensor: checksum mismatch")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(DTYPES[dtype_id])


def read_tensor(path) -> np.ndarray:
    return parse_tensor(Path(path).read_bytes())


def write_tensor(path, array) -> None:
    Path(path).write_bytes(serialize_tensor(array))


# ---------------------------------------------------------------- cache files

_CACHE_FIXED = struct.Struct("<4sHQ")
_CACHE_GEOM = struct.Struct("<IIIQQIIBBBB")
_FLAG_PASSTHROUGH = 1


def serialize_cache(c) -> bytes:
    """Encode a ``codec.CompressedCache``."""
    key_plan = serialize_plan(c.key_plan) if c.key_plan is not None else b""
    value_plan = serialize_plan(c.value_plan) if c.value_plan is not None else b""
    sinks = c.sink_bytes()
    window = c.window_bytes()
    parts = [
        _CACHE_GEOM.pack(
            c.shape.layers, c.shape.kv_heads, c.shape.head_dim, c.shape.tokens,
            c.start_position, c.sink_count, c.window,
            int(c.lossless.kind), c.lossless.level,
            DTYPE_IDS[np.dtype(c.dtype)],
            _FLAG_PASSTHROUGH if c.passthrough else 0,
        ),
        _pack_rope(c.rope),
        struct.pack("<QQ", c.key_fingerprint, c.value_fingerprint),
        struct.pack("<I", len(key_plan)), key_plan,
        struct.pack("<I", len(value_plan)), value_plan,
        struct.pack("<Q", len(sinks)), sinks,
        struct.pack("<Q", len(window)), window,
        struct.pack("<Q", len(c.key_payload)), c.key_payload,
        struct.pack("<Q", len(c.value_payload)), c.value_payload,
    ]
    body = b"".join(parts)
    total = _CACHE_FIXED.size + len(body) + 4
    head = _CACHE_FIXED.pack(CACHE_MAGIC, FORMAT_VERSION, total)
    return head + body + struct.pack("<I", zlib.crc32(head + body))


def cache_header_bytes(c, encoded_length: int) -> int:
    """Bytes of a serialized cache that are neither token data nor payload."""
    return encoded_length - len(c.sink_bytes()) - len(c.window_bytes()) - len(c.key_payload) - len(c.value_payload)


_CACHE_SECTIONS = (
    ("I", "key_plan", "key plan"),
    ("I", "value_plan", "value plan"),
    ("Q", "sink_raw", "raw sinks"),
    ("Q", "window_raw", "raw window"),
    ("Q", "key_payload", "key payload"),
    ("Q", "value_payload", "value payload"),
)


def _read_cache_sections(r: _Reader) -> dict:
    out = {"geometry": r.unpack(_CACHE_GEOM.format[1:], "geometry"), "rope": _unpack_rope(r)}
    out["key_fingerprint"], out["value_fingerprint"] = r.unpack("QQ", "fingerprints")
    for fmt, name, label in _CACHE_SECTIONS:
        (n,) = r.unpack(fmt, f"{label} length")
        out[name] = bytes(r.take(n, label))
    return out


def parse_cache(buf):
    from .codec import CacheShape, CompressedCache
    from .entropy import LosslessCodec

    r = _Reader(buf, "cache")
    _check_magic_version(r, CACHE_MAGIC, "cache")
    (total,) = r.unpack("Q", "length")
    if len(r.buf) < total:
        # walk the sections so the message says where the data stops
        where = "in checksum"
        try:
            _read_cache_sections(r)
        except TruncatedFile as exc:
            where = str(exc).removeprefix("cache: ")
        raise TruncatedFile(f"cache: file has {len(r.buf)} bytes, header declares {total}; {where}")
    if len(r.buf) > total:
        raise CorruptPayload(f"cache: {len(r.buf) - total} bytes beyond declared length")
    (crc,) = struct.unpack_from("<I", r.buf, total - 4)
    if zlib.crc32(r.buf[: total - 4]) != crc:
        raise ChecksumMismatch("cache: checksum mismatch")
    sec = _read_cache_sections(r)
    if r.pos != total - 4:
        raise CorruptPayload("cache: section lengths inconsistent with file length")
    l, h, d, t, start, sinks, window, codec_id, level, dtype_id, flags = sec.pop("geometry")
    if dtype_id not in DTYPES:
        raise CorruptPayload(f"cache: unknown element type id {dtype_id}")
    try:
        shape = CacheShape(l, h, d, t)
        lossless = LosslessCodec(codec_id, level)
    except (InvalidInput, ValueError) as exc:
        raise CorruptPayload(f"cache: invalid header: {exc}") from exc
    for name in ("key_plan", "value_plan"):
        sec[name] = parse_plan(sec[name]) if sec[name] else None
    return CompressedCache.from_sections(
        shape=shape,
        start_position=start,
        sink_count=sinks,
        window=window,
        lossless=lossless,
        dtype=DTYPES[dtype_id],
        passthrough=bool(flags & _FLAG_PASSTHROUGH),
        **sec,
    )


def sniff(buf) -> str:
    """Name the format of ``buf`` from its magic bytes."""
    head = bytes(buf[:4])
    return {
        ARTIFACT_MAGIC: "artifact",
        CACHE_MAGIC: "cache",
        TENSOR_MAGIC: "tensor",
        PLAN_MAGIC: "plan",
    }.get(head, "unknown")
