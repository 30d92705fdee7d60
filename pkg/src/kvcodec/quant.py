"""Grouped scalar quantization of decorrelated coordinates.

A group is a contiguous run of ``size`` components over a block of tokens.
Integer and FP8 groups carry one binary16 shift and one binary16 scale; the
stored (rounded) values are the ones used to compute codes, so decoding from
bytes is bit-faithful. Codes are packed little-endian bit order, token-major.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptPayload, InvalidInput

GROUP_PARAM_BITS = 32
# smallest positive normal binary16
SCALE_FLOOR = float(np.finfo(np.float16).tiny)
E4M3_MAX = 448.0


class ElementType(enum.IntEnum):
    """Per-group element encodings; the integer value is the on-disk id."""

    NONE = 0
    INT2 = 1
    INT4 = 2
    FP8_E4M3 = 3
    # Raw binary16 coordinates, no shift/scale. Only used by the PCA-only planner.
    FP16 = 4

    @property
    def payload_bits(self) -> int:
        return _PAYLOAD_BITS[self]

    @property
    def has_params(self) -> bool:
        return self in (ElementType.INT2, ElementType.INT4, ElementType.FP8_E4M3)

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, name: str) -> "ElementType":
        key = name.strip().lower()
        for et, label in _LABELS.items():
            if label == key:
                return et
        raise InvalidInput(f"unknown element type {name!r}")


_PAYLOAD_BITS = {
    ElementType.NONE: 0,
    ElementType.INT2: 2,
    ElementType.INT4: 4,
    ElementType.FP8_E4M3: 8,
    ElementType.FP16: 16,
}
_LABELS = {
    ElementType.NONE: "none",
    ElementType.INT2: "int2",
    ElementType.INT4: "int4",
    ElementType.FP8_E4M3: "fp8",
    ElementType.FP16: "fp16",
}


def bit_cost_per_token(size: int, etype: ElementType) -> int:
    etype = ElementType(etype)
    if etype is ElementType.NONE:
        return 0
    overhead = GROUP_PARAM_BITS if etype.has_params else 0
    return size * etype.payload_bits + overhead


# ---------------------------------------------------------------- E4M3


def _build_e4m3_table() -> np.ndarray:
    table = np.empty(256, dtype=np.float64)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        exp = (code >> 3) & 0xF
        man = code & 0x7
        if exp == 0xF and man == 0x7:
            table[code] = np.nan
        elif exp == 0:
            table[code] = sign * man / 8.0 * 2.0**-6
        else:
            table[code] = sign * (1.0 + man / 8.0) * 2.0 ** (exp - 7)
    return table


E4M3_VALUES = _build_e4m3_table()
E4M3_VALUES.setflags(write=False)
# codes 0x00..0x7E are the non-negative finite values in increasing order
_E4M3_POSITIVE = E4M3_VALUES[:0x7F].copy()


def e4m3_decode(codes) -> np.ndarray | float:
    c = np.asarray(codes)
    out = E4M3_VALUES[c.astype(np.uint8)]
    return float(out) if out.ndim == 0 else out


def e4m3_encode(x) -> np.ndarray | int:
    """Round-to-nearest-even into E4M3, saturating at +/-448 (never NaN)."""
    v = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidInput("e4m3_encode needs finite input")
    mag = np.minimum(np.abs(v), E4M3_MAX)
    hi = np.searchsorted(_E4M3_POSITIVE, mag, side="left")
    hi = np.minimum(hi, 0x7E)
    lo = np.maximum(hi - 1, 0)
    d_lo = mag - _E4M3_POSITIVE[lo]
    d_hi = _E4M3_POSITIVE[hi] - mag
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi % 2 == 0))
    code = np.where(pick_hi, hi, lo).astype(np.uint8)
    code = code | np.where(np.signbit(v), 0x80, 0).astype(np.uint8)
    return int(code) if code.ndim == 0 else code


# ---------------------------------------------------------------- groups


def _to_half(value: float, what: str) -> float:
    with np.errstate(over="ignore"):
        h = np.float16(value)
    if not np.isfinite(h):
        raise InvalidInput(f"group {what} {value!r} overflows binary16")
    return float(h)


@dataclass(frozen=True)
class QuantizedGroup:
    etype: ElementType
    size: int
    tokens: int
    codes: np.ndarray
    shift: float | None = None
    scale: float | None = None

    @property
    def bit_cost_per_token(self) -> int:
        return bit_cost_per_token(self.size, self.etype)

    @property
    def payload_bytes(self) -> int:
        """Serialized size: parameters plus packed codes."""
        params = GROUP_PARAM_BITS // 8 if self.etype.has_params else 0
        return params + packed_length(self.tokens * self.size, self.etype.payload_bits)

    def to_bytes(self) -> bytes:
        head = b""
        if self.etype.has_params:
            head = struct.pack("<ee", self.shift, self.scale)
        return head + pack_codes(self.codes, self.etype.payload_bits)

    @classmethod
    def from_bytes(cls, buf, etype: ElementType, size: int, tokens: int) -> "QuantizedGroup":
        etype = ElementType(etype)
        expected = QuantizedGroup(etype, size, tokens, np.zeros(0, np.uint16)).payload_bytes
        if len(buf) != expected:
            raise CorruptPayload(f"group needs {expected} bytes, got {len(buf)}")
        shift = scale = None
        off = 0
        if etype.has_params:
            shift, scale = struct.unpack_from("<ee", buf, 0)
            off = 4
        codes = unpack_codes(bytes(buf[off:]), etype.payload_bits, tokens * size)
        return cls(etype, size, tokens, codes, shift, scale)


def quantize_group(block, etype: ElementType) -> QuantizedGroup:
    """Quantize a (tokens x size) block with one shared shift and scale."""
    etype = ElementType(etype)
    x = np.asarray(block, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInput("block must be 2-D (tokens x size)")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("block contains non-finite entries")
    if etype is ElementType.NONE:
        raise InvalidInput("NONE groups carry no codes; use simulate_quantization")
    tokens, size = x.shape
    flat = x.reshape(-1)

    if etype is ElementType.FP16:
        with np.errstate(over="ignore"):
            half = flat.astype(np.float16)
        if not np.all(np.isfinite(half)):
            raise InvalidInput("block overflows binary16")
        return QuantizedGroup(etype, size, tokens, half.view(np.uint16).copy())

    if flat.size == 0:
        return QuantizedGroup(etype, size, tokens, np.zeros(0, np.uint8), 0.0, SCALE_FLOOR)

    if etype is ElementType.FP8_E4M3:
        shift = _to_half(flat.mean(), "shift")
        span = float(np.abs(flat - shift).max())
        scale = _to_half(max(span / E4M3_MAX, SCALE_FLOOR), "scale")
        codes = e4m3_encode((flat - shift) / scale)
        return QuantizedGroup(etype, size, tokens, codes, shift, scale)

    levels = (1 << etype.payload_bits) - 1
    lo, hi = float(flat.min()), float(flat.max())
    shift = _to_half(lo, "shift")
    scale = _to_half(max((hi - lo) / levels, SCALE_FLOOR), "scale")
    codes = np.clip(np.rint((flat - shift) / scale), 0, levels).astype(np.uint8)
    return QuantizedGroup(etype, size, tokens, codes, shift, scale)


def dequantize_group(group: QuantizedGroup, tokens: int | None = None) -> np.ndarray:
    if tokens is None:
        tokens = group.tokens
    size = group.size
    if group.etype is ElementType.NONE:
        return np.zeros((tokens, size))
    if group.codes.shape[0] != size * tokens:
        raise CorruptPayload(f"group holds {group.codes.shape[0]} codes, expected {size * tokens}")
    if group.etype is ElementType.FP16:
        vals = group.codes.astype(np.uint16).view(np.float16).astype(np.float64)
    elif group.etype is ElementType.FP8_E4M3:
        vals = E4M3_VALUES[group.codes] * group.scale + group.shift
    else:
        vals = group.codes.astype(np.float64) * group.scale + group.shift
    return vals.reshape(tokens, size)


def simulate_quantization(block, etype: ElementType) -> tuple[np.ndarray, int]:
    """Round-trip ``block`` through ``etype``; returns (dequantized, bits per token)."""
    etype = ElementType(etype)
    x = np.asarray(block, dtype=np.float64)
    if etype is ElementType.NONE:
        return np.zeros_like(x), 0
    g = quantize_group(x, etype)
    return dequantize_group(g), g.bit_cost_per_token


def block_error_change(block, etype: ElementType) -> float:
    """Squared error of quantizing ``block`` minus that of zeroing it.

    Kept as one function so the allocator, its brute-force oracle and plan
    evaluation all produce the same floating-point values.
    """
    etype = ElementType(etype)
    x = np.asarray(block, dtype=np.float64)
    if etype is ElementType.NONE:
        return 0.0
    q, _ = simulate_quantization(x, etype)
    zero_err = (x * x).sum()
    diff = x - q
    return float(-zero_err + (diff * diff).sum())


# ---------------------------------------------------------------- packing


def packed_length(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def pack_codes(codes, bits: int) -> bytes:
    """Pack unsigned codes, ``bits`` each, least-significant bit first."""
    c = np.asarray(codes).astype(np.uint64).reshape(-1)
    if bits == 0 or c.size == 0:
        return b""
    if np.any(c >> np.uint64(bits)):
        raise InvalidInput(f"code exceeds {bits} bits")
    if bits == 8:
        return c.astype(np.uint8).tobytes()
    shifts = np.arange(bits, dtype=np.uint64)
    bitplane = ((c[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bitplane.reshape(-1), bitorder="little").tobytes()


def unpack_codes(buf: bytes, bits: int, count: int) -> np.ndarray:
    dtype = np.uint16 if bits > 8 else np.uint8
    if bits == 0 or count == 0:
        return np.zeros(0, dtype)
    if len(buf) != packed_length(count, bits):
        raise CorruptPayload(f"packed codes: expected {packed_length(count, bits)} bytes, got {len(buf)}")
    raw = np.frombuffer(buf, dtype=np.uint8)
    if bits == 8:
        return raw.copy()
    flat = np.unpackbits(raw, bitorder="little")[: count * bits].reshape(count, bits)
    weights = (1 << np.arange(bits)).astype(np.uint32)
    return (flat.astype(np.uint32) @ weights).astype(dtype)
