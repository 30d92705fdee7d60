"""End-to-end compression of a KV cache and its exact inverse.

Token layout along the time axis::

    [0, s)        sinks   - stored raw
    [s, t - w)    middle  - projected, quantized per plan, entropy-coded
    [t - w, t)    window  - stored raw

Keys lose their rotary embedding before projection (at absolute positions)
and get it back after reconstruction; values are never rotated. Feature
order inside a token row is layer-major, then head, then head dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import entropy
from .allocator import AllocationPlan
from .container import CalibrationArtifact, cache_header_bytes, serialize_cache
from .entropy import LosslessCodec
from .errors import ArtifactMismatch, CorruptPayload, InvalidInput, NothingToCompress
from .linalg import PcaModel, project, reconstruct
from .quant import ElementType, QuantizedGroup, dequantize_group, quantize_group
from .rope import RopeConfig, rope_apply, rope_undo

BASELINE_BITS = 16
_DTYPES = (np.dtype(np.float16), np.dtype(np.float32), np.dtype(np.float64))


@dataclass(frozen=True)
class CacheShape:
    layers: int
    kv_heads: int
    head_dim: int
    tokens: int

    def __post_init__(self):
        for name in ("layers", "kv_heads", "head_dim", "tokens"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise InvalidInput(f"{name} must be a non-negative integer, got {v}")
            object.__setattr__(self, name, int(v))
        if min(self.layers, self.kv_heads, self.head_dim) < 1:
            raise InvalidInput("layers, kv_heads and head_dim must be positive")

    @property
    def feature_count(self) -> int:
        return self.layers * self.kv_heads * self.head_dim


def kv_cache_bytes(shape: CacheShape) -> int:
    """Size of a 16-bit key+value cache: ``4 * l * h * d_head * t`` bytes."""
    dims = (shape.layers, shape.kv_heads, shape.head_dim, shape.tokens)
    if min(dims) < 1:
        raise InvalidInput("all cache dimensions must be positive")
    total = 4 * shape.layers * shape.kv_heads * shape.head_dim * shape.tokens
    if total >= 1 << 63:
        raise InvalidInput("cache size overflows 64-bit byte count")
    return total


@dataclass(frozen=True, eq=False)
class KvCache:
    """Keys and values, each shaped (layers, kv_heads, tokens, head_dim)."""

    keys: np.ndarray
    values: np.ndarray
    rope: RopeConfig | None = None
    start_position: int = 0

    def __post_init__(self):
        k = np.asarray(self.keys)
        v = np.asarray(self.values)
        if k.ndim != 4 or k.shape != v.shape:
            raise InvalidInput(f"keys/values must share a 4-D shape, got {k.shape} and {v.shape}")
        if k.dtype != v.dtype or k.dtype not in _DTYPES:
            raise InvalidInput(f"keys/values must share a float16/32/64 dtype, got {k.dtype}, {v.dtype}")
        if not (np.all(np.isfinite(k)) and np.all(np.isfinite(v))):
            raise InvalidInput("cache contains non-finite entries")
        if self.rope is not None and self.rope.head_dim != k.shape[3]:
            raise InvalidInput(f"RoPE head_dim {self.rope.head_dim} != cache head_dim {k.shape[3]}")
        if self.start_position < 0:
            raise InvalidInput("start_position must be non-negative")
        object.__setattr__(self, "keys", k)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> CacheShape:
        l, h, t, d = self.keys.shape
        return CacheShape(l, h, d, t)

    @property
    def dtype(self) -> np.dtype:
        return self.keys.dtype

    def stream(self, name: str) -> np.ndarray:
        return self.keys if name == "key" else self.values

    def to_tensor(self) -> np.ndarray:
        """Stack as (2, layers, heads, tokens, head_dim): keys then values."""
        return np.stack([self.keys, self.values])

    @classmethod
    def from_tensor(cls, tensor, rope: RopeConfig | None = None, start_position: int = 0) -> "KvCache":
        t = np.asarray(tensor)
        if t.ndim != 5 or t.shape[0] != 2:
            raise InvalidInput(f"cache tensor must be (2, l, h, t, d), got {t.shape}")
        return cls(t[0], t[1], rope, start_position)

    def equals(self, other: "KvCache") -> bool:
        return (
            self.dtype == other.dtype
            and self.keys.tobytes() == other.keys.tobytes()
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(frozen=True)
class CompressionPolicy:
    sink_count: int = 4
    window: int = 128
    lossless: LosslessCodec = field(default_factory=LosslessCodec)

    def __post_init__(self):
        if self.sink_count < 0 or self.window < 0:
            raise InvalidInput("sink_count and window must be non-negative")


def token_rows(stream: np.ndarray) -> np.ndarray:
    """(l, h, t, d) -> (t, l*h*d) float64 rows in canonical feature order."""
    l, h, t, d = stream.shape
    return np.asarray(stream, dtype=np.float64).transpose(2, 0, 1, 3).reshape(t, l * h * d)


def rows_to_stream(rows: np.ndarray, layers: int, heads: int, head_dim: int) -> np.ndarray:
    t = rows.shape[0]
    return rows.reshape(t, layers, heads, head_dim).transpose(1, 2, 0, 3)


def feature_index(layer: int, head: int, dim: int, heads: int, head_dim: int) -> int:
    return (layer * heads + head) * head_dim + dim


def segment_bounds(tokens: int, sink_count: int, window: int) -> tuple[int, int]:
    """(middle_start, middle_end); empty middle means nothing to compress."""
    s = min(sink_count, tokens)
    e = max(s, tokens - window)
    return s, e


# ------------------------------------------------------------ group streams


def encode_groups(d: np.ndarray, plan: AllocationPlan) -> list[QuantizedGroup]:
    if d.shape[1] < plan.covered_components:
        raise InvalidInput(f"plan covers {plan.covered_components} components, data has {d.shape[1]}")
    return [
        quantize_group(d[:, start : start + size], et)
        for start, size, et in plan.spans()
        if et is not ElementType.NONE
    ]


def encode_stream(d: np.ndarray, plan: AllocationPlan) -> bytes:
    """Concatenated group records (params + packed codes) in plan order."""
    return b"".join(g.to_bytes() for g in encode_groups(d, plan))


def quantized_stream_bytes(plan: AllocationPlan, tokens: int) -> int:
    return sum(
        QuantizedGroup(et, size, tokens, np.zeros(0, np.uint8)).payload_bytes
        for _, size, et in plan.spans()
        if et is not ElementType.NONE
    )


def decode_stream(raw: bytes, plan: AllocationPlan, tokens: int, rank: int) -> np.ndarray:
    """Inverse of ``encode_stream``; uncovered components come back as zeros."""
    if plan.covered_components > rank:
        raise InvalidInput("plan covers more components than the model rank")
    d = np.zeros((tokens, rank))
    off = 0
    for start, size, et in plan.spans():
        if et is ElementType.NONE:
            continue
        n = QuantizedGroup(et, size, tokens, np.zeros(0, np.uint8)).payload_bytes
        if off + n > len(raw):
            raise CorruptPayload("quantized stream shorter than its plan")
        g = QuantizedGroup.from_bytes(raw[off : off + n], et, size, tokens)
        d[:, start : start + size] = dequantize_group(g, tokens)
        off += n
    if off != len(raw):
        raise CorruptPayload(f"quantized stream has {len(raw) - off} unexpected trailing bytes")
    return d


def quantize_roundtrip(d: np.ndarray, plan: AllocationPlan, rank: int | None = None) -> np.ndarray:
    """Reference path: quantize then dequantize every group in memory."""
    rank = d.shape[1] if rank is None else rank
    out = np.zeros((d.shape[0], rank))
    groups = iter(encode_groups(d, plan))
    for start, size, et in plan.spans():
        if et is not ElementType.NONE:
            out[:, start : start + size] = dequantize_group(next(groups))
    return out


# ------------------------------------------------------------ container type


@dataclass(frozen=True, eq=False)
class CompressedCache:
    shape: CacheShape
    start_position: int
    sink_count: int
    window: int
    lossless: LosslessCodec
    dtype: np.dtype
    passthrough: bool
    rope: RopeConfig | None
    key_fingerprint: int
    value_fingerprint: int
    key_plan: AllocationPlan | None
    value_plan: AllocationPlan | None
    sink_keys: np.ndarray
    sink_values: np.ndarray
    window_keys: np.ndarray
    window_values: np.ndarray
    key_payload: bytes
    value_payload: bytes

    @property
    def bounds(self) -> tuple[int, int]:
        if self.passthrough:
            s = min(self.sink_count, self.shape.tokens)
            return s, s
        return segment_bounds(self.shape.tokens, self.sink_count, self.window)

    @property
    def middle_tokens(self) -> int:
        s, e = self.bounds
        return e - s

    def sink_bytes(self) -> bytes:
        return self.sink_keys.tobytes() + self.sink_values.tobytes()

    def window_bytes(self) -> bytes:
        return self.window_keys.tobytes() + self.window_values.tobytes()

    def to_bytes(self) -> bytes:
        return serialize_cache(self)

    @classmethod
    def from_sections(cls, *, shape, dtype, sink_raw, window_raw, passthrough, sink_count, window, **kw):
        t = shape.tokens
        if passthrough:
            s = e = min(sink_count, t)
        else:
            s, e = segment_bounds(t, sink_count, window)
        dtype = np.dtype(dtype)
        lhd = shape.layers * shape.kv_heads * shape.head_dim

        def split(raw, count, what):
            need = 2 * lhd * count * dtype.itemsize
            if len(raw) != need:
                raise CorruptPayload(f"cache: {what} section has {len(raw)} bytes, expected {need}")
            arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
            arr = arr.reshape(2, shape.layers, shape.kv_heads, count, shape.head_dim)
            return arr[0], arr[1]

        sk, sv = split(sink_raw, s, "sink")
        wk, wv = split(window_raw, t - e, "window")
        return cls(shape=shape, dtype=dtype, passthrough=passthrough, sink_count=sink_count, window=window,
                   sink_keys=sk, sink_values=sv, window_keys=wk, window_values=wv, **kw)


@dataclass(frozen=True)
class CompressionStats:
    """Byte counts and ratios against a 16-bit baseline.

    The sliding window is excluded from numerator and denominator; sinks are
    counted on both sides (raw at 16 bits).
    """

    baseline_sink_bytes: int
    baseline_middle_bytes: int
    sink_bytes: int
    payload_bytes: int
    quantized_bytes: int
    header_bytes: int

    @property
    def compression_ratio(self) -> float:
        denom = self.sink_bytes + self.payload_bytes
        return (self.baseline_sink_bytes + self.baseline_middle_bytes) / denom if denom else 1.0

    @property
    def compression_ratio_with_header(self) -> float:
        denom = self.sink_bytes + self.payload_bytes + self.header_bytes
        return (self.baseline_sink_bytes + self.baseline_middle_bytes) / denom

    @property
    def quantization_ratio(self) -> float:
        """Middle tokens only, before entropy coding and framing."""
        if not self.baseline_middle_bytes:
            return 1.0
        return self.baseline_middle_bytes / self.quantized_bytes if self.quantized_bytes else float("inf")

    @property
    def entropy_gain(self) -> float:
        """Quantized bytes over entropy-coded bytes (framing included)."""
        return self.quantized_bytes / self.payload_bytes if self.payload_bytes else 1.0


def compression_stats(c: CompressedCache) -> CompressionStats:
    s, e = c.bounds
    m = e - s
    per_token = 2 * c.shape.feature_count * BASELINE_BITS // 8
    quantized = 0
    if m:
        quantized = quantized_stream_bytes(c.key_plan, m) + quantized_stream_bytes(c.value_plan, m)
    encoded = len(serialize_cache(c))
    return CompressionStats(
        baseline_sink_bytes=per_token * s,
        baseline_middle_bytes=per_token * m,
        sink_bytes=len(c.sink_bytes()),
        payload_bytes=len(c.key_payload) + len(c.value_payload),
        quantized_bytes=quantized,
        header_bytes=cache_header_bytes(c, encoded),
    )


def compression_ratio(c: CompressedCache) -> float:
    return compression_stats(c).compression_ratio


# ------------------------------------------------------------ compress / decompress


def _check_artifact(art: CalibrationArtifact, stream: str, shape: CacheShape, plan: AllocationPlan):
    if art.stream != stream:
        raise InvalidInput(f"{stream} stream given a {art.stream} artifact")
    if art.feature_count != shape.feature_count:
        raise InvalidInput(
            f"{stream} artifact has {art.feature_count} features, cache has {shape.feature_count}"
        )
    if plan is None:
        raise InvalidInput(f"missing {stream} plan")
    if plan.components != art.rank:
        raise InvalidInput(f"{stream} plan is for rank {plan.components}, artifact rank is {art.rank}")
    if plan.artifact_fingerprint and plan.artifact_fingerprint != art.fingerprint:
        raise ArtifactMismatch(
            f"{stream} plan was built for artifact {plan.artifact_fingerprint:016x}, got {art.fingerprint:016x}"
        )


def _check_rope(art: CalibrationArtifact, rope: RopeConfig | None):
    if art.rope is not None and rope is not None and art.rope != rope:
        raise ArtifactMismatch(f"cache RoPE {rope} differs from calibration RoPE {art.rope}")


def stream_rows(cache: KvCache, stream: str, start: int, end: int) -> np.ndarray:
    """Token rows [start, end) of one stream, with RoPE removed from keys."""
    x = np.asarray(cache.stream(stream)[:, :, start:end, :], dtype=np.float64)
    if stream == "key" and cache.rope is not None:
        x = rope_undo(cache.rope, x, cache.start_position + start)
    return token_rows(x)


def compress(
    cache: KvCache,
    key_artifact: CalibrationArtifact,
    value_artifact: CalibrationArtifact,
    policy: CompressionPolicy,
    key_plan: AllocationPlan,
    value_plan: AllocationPlan,
    strict: bool = False,
) -> CompressedCache:
    """Compress ``cache``; with an empty middle the cache is stored raw.

    ``strict=True`` raises ``NothingToCompress`` instead of storing raw.
    """
    shape = cache.shape
    t = shape.tokens
    s, e = segment_bounds(t, policy.sink_count, policy.window)
    passthrough = e <= s
    if passthrough and strict:
        raise NothingToCompress(f"t={t} leaves no tokens between {policy.sink_count} sinks and window {policy.window}")

    for stream, art, plan in (("key", key_artifact, key_plan), ("value", value_artifact, value_plan)):
        _check_artifact(art, stream, shape, plan)
    _check_rope(key_artifact, cache.rope)

    key_payload = value_payload = b""
    if not passthrough:
        payloads = []
        for stream, art, plan in (("key", key_artifact, key_plan), ("value", value_artifact, value_plan)):
            d = project(art.model, stream_rows(cache, stream, s, e))
            payloads.append(entropy.encode(policy.lossless, encode_stream(d, plan)))
        key_payload, value_payload = payloads

    return CompressedCache(
        shape=shape,
        start_position=cache.start_position,
        sink_count=policy.sink_count,
        window=policy.window,
        lossless=policy.lossless,
        dtype=cache.dtype,
        passthrough=passthrough,
        rope=cache.rope,
        key_fingerprint=key_artifact.fingerprint,
        value_fingerprint=value_artifact.fingerprint,
        key_plan=key_plan,
        value_plan=value_plan,
        sink_keys=np.ascontiguousarray(cache.keys[:, :, :s]),
        sink_values=np.ascontiguousarray(cache.values[:, :, :s]),
        window_keys=np.ascontiguousarray(cache.keys[:, :, e:]),
        window_values=np.ascontiguousarray(cache.values[:, :, e:]),
        key_payload=key_payload,
        value_payload=value_payload,
    )


def _verify_artifacts(c: CompressedCache, key_artifact, value_artifact):
    for stream, art, fp in (("key", key_artifact, c.key_fingerprint), ("value", value_artifact, c.value_fingerprint)):
        if art.fingerprint != fp:
            raise ArtifactMismatch(f"{stream} artifact {art.fingerprint:016x} does not match cache ({fp:016x})")
        if art.stream != stream:
            raise ArtifactMismatch(f"{stream} slot given a {art.stream} artifact")


def decode_middle(c: CompressedCache, art: CalibrationArtifact, stream: str) -> np.ndarray:
    """Decorrelated coordinates of the middle tokens (m x rank), dequantized."""
    plan = c.key_plan if stream == "key" else c.value_plan
    payload = c.key_payload if stream == "key" else c.value_payload
    raw = entropy.decode(payload)
    return decode_stream(raw, plan, c.middle_tokens, art.rank)


def _middle_stream(c: CompressedCache, art: CalibrationArtifact, stream: str, layers: range) -> np.ndarray:
    """Reconstructed middle tokens for ``layers`` as (len(layers), h, m, d) float64."""
    h, dh = c.shape.kv_heads, c.shape.head_dim
    d = decode_middle(c, art, stream)
    width = h * dh
    feats = slice(layers.start * width, layers.stop * width)
    rows = reconstruct(art.model, d, features=feats)
    x = rows_to_stream(rows, len(layers), h, dh)
    if stream == "key" and c.rope is not None:
        x = rope_apply(c.rope, x, c.start_position + c.bounds[0])
    return x


def decompress_layers(c: CompressedCache, key_artifact, value_artifact, layers: range | None = None) -> KvCache:
    """Decode only ``layers`` (a contiguous range), using the matching basis rows."""
    _verify_artifacts(c, key_artifact, value_artifact)
    if layers is None:
        layers = range(c.shape.layers)
    if layers.step != 1 or not 0 <= layers.start < layers.stop <= c.shape.layers:
        raise InvalidInput(f"layer range {layers} invalid for {c.shape.layers} layers")
    sl = slice(layers.start, layers.stop)
    out = []
    for stream, art in (("key", key_artifact), ("value", value_artifact)):
        sink = c.sink_keys if stream == "key" else c.sink_values
        win = c.window_keys if stream == "key" else c.window_values
        parts = [sink[sl]]
        if c.middle_tokens:
            parts.append(_middle_stream(c, art, stream, layers).astype(c.dtype))
        parts.append(win[sl])
        out.append(np.concatenate(parts, axis=2))
    return KvCache(out[0], out[1], c.rope, c.start_position)


def decompress(c: CompressedCache, key_artifact: CalibrationArtifact, value_artifact: CalibrationArtifact) -> KvCache:
    return decompress_layers(c, key_artifact, value_artifact, None)


def reference_middle(
    cache: KvCache,
    key_artifact: CalibrationArtifact,
    value_artifact: CalibrationArtifact,
    policy: CompressionPolicy,
    key_plan: AllocationPlan,
    value_plan: AllocationPlan,
) -> dict[str, np.ndarray]:
    """Middle tokens through project -> quantize -> dequantize -> reconstruct, in memory.

    Returns 64-bit (l, h, m, d) arrays per stream, before the final narrowing.
    """
    s, e = segment_bounds(cache.shape.tokens, policy.sink_count, policy.window)
    shape = cache.shape
    out = {}
    for stream, art, plan in (("key", key_artifact, key_plan), ("value", value_artifact, value_plan)):
        model: PcaModel = art.model
        d = project(model, stream_rows(cache, stream, s, e))
        dq = quantize_roundtrip(d, plan, model.rank)
        rows = reconstruct(model, dq, features=slice(0, shape.feature_count))
        x = rows_to_stream(rows, shape.layers, shape.kv_heads, shape.head_dim)
        if stream == "key" and cache.rope is not None:
            x = rope_apply(cache.rope, x, cache.start_position + s)
        out[stream] = x
    return out
