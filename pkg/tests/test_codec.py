import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kvcodec.allocator import AllocationPlan, allocate_budget
from kvcodec.codec import (
    CacheShape,
    CompressionPolicy,
    KvCache,
    compress,
    compression_stats,
    decode_stream,
    decompress,
    decompress_layers,
    encode_stream,
    feature_index,
    kv_cache_bytes,
    quantize_roundtrip,
    reference_middle,
    rows_to_stream,
    segment_bounds,
    stream_rows,
    token_rows,
)
from kvcodec.entropy import CodecKind, LosslessCodec
from kvcodec.errors import ArtifactMismatch, CorruptPayload, InvalidInput, NothingToCompress
from kvcodec.linalg import project
from kvcodec.quant import ElementType
from kvcodec.rope import RopeConfig

from conftest import rng

MIB = 1 << 20


def test_kv_cache_bytes_reference_models():
    assert kv_cache_bytes(CacheShape(32, 8, 128, 1024)) == 128 * MIB
    assert kv_cache_bytes(CacheShape(40, 8, 128, 1024)) == 160 * MIB
    assert kv_cache_bytes(CacheShape(1, 1, 1, 1)) == 4
    with pytest.raises(InvalidInput):
        kv_cache_bytes(CacheShape(1, 1, 1, 0))
    with pytest.raises(InvalidInput):
        CacheShape(0, 1, 1, 1)


@pytest.mark.parametrize("t,s,w,want", [
    (100, 4, 10, (4, 90)),
    (14, 4, 10, (4, 4)),
    (10, 4, 10, (4, 4)),
    (3, 4, 10, (3, 3)),
    (100, 0, 0, (0, 100)),
])
def test_segment_bounds(t, s, w, want):
    assert segment_bounds(t, s, w) == want


def test_feature_order_is_layer_head_dim():
    x = rng(0).standard_normal((3, 2, 5, 4))
    rows = token_rows(x)
    assert rows[2, feature_index(1, 1, 3, 2, 4)] == x[1, 1, 2, 3]
    np.testing.assert_array_equal(rows_to_stream(rows, 3, 2, 4), x)


def test_kv_cache_validation():
    good = np.zeros((1, 1, 3, 4), np.float16)
    with pytest.raises(InvalidInput):
        KvCache(good, good.astype(np.float32))
    with pytest.raises(InvalidInput):
        KvCache(good, np.zeros((1, 1, 2, 4), np.float16))
    with pytest.raises(InvalidInput):
        KvCache(good.astype(np.int16), good.astype(np.int16))
    with pytest.raises(InvalidInput):
        KvCache(good, good, RopeConfig(6))
    bad = good.copy()
    bad[0, 0, 0, 0] = np.inf
    with pytest.raises(InvalidInput):
        KvCache(bad, good)
    with pytest.raises(InvalidInput):
        KvCache.from_tensor(good)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20))
def test_stream_bytes_round_trip(seed, tokens):
    g = np.random.default_rng(seed)
    d = g.standard_normal((tokens, 12)) * 2.0 ** -np.arange(12)
    plan = AllocationPlan(((2, ElementType.FP16), (3, ElementType.FP8_E4M3), (1, ElementType.NONE),
                           (4, ElementType.INT4), (1, ElementType.INT2)), 12)
    raw = encode_stream(d, plan)
    np.testing.assert_array_equal(decode_stream(raw, plan, tokens, 12), quantize_roundtrip(d, plan))
    with pytest.raises(CorruptPayload):
        decode_stream(raw + b"\x00", plan, tokens, 12)
    with pytest.raises(CorruptPayload):
        decode_stream(raw[:-1], plan, tokens, 12)


def _run(small_cache, small_setup, policy=CompressionPolicy(4, 32)):
    (ka, kp), (va, vp) = small_setup["key"], small_setup["value"]
    return compress(small_cache, ka, va, policy, kp, vp), ka, va


def test_sinks_and_window_bit_exact(small_cache, small_setup):
    c, ka, va = _run(small_cache, small_setup)
    back = decompress(c, ka, va)
    s, e = c.bounds
    assert (s, e) == (4, 268)
    for name in ("keys", "values"):
        a, b = getattr(small_cache, name), getattr(back, name)
        assert a[:, :, :s].tobytes() == b[:, :, :s].tobytes()
        assert a[:, :, e:].tobytes() == b[:, :, e:].tobytes()
    mid = small_cache.to_tensor()[:, :, :, s:e].astype(np.float64)
    err = np.linalg.norm(back.to_tensor()[:, :, :, s:e] - mid) / np.linalg.norm(mid)
    assert err < 0.2


def test_decompress_matches_in_memory_reference(small_cache, small_setup):
    c, ka, va = _run(small_cache, small_setup)
    back = decompress(c, ka, va)
    ref = reference_middle(small_cache, ka, va, CompressionPolicy(4, 32), small_setup["key"][1],
                           small_setup["value"][1])
    s, e = c.bounds
    np.testing.assert_array_equal(back.keys[:, :, s:e], ref["key"].astype(np.float16))
    np.testing.assert_array_equal(back.values[:, :, s:e], ref["value"].astype(np.float16))


def test_layer_subset_decoding(small_cache, small_setup):
    c, ka, va = _run(small_cache, small_setup)
    full = decompress(c, ka, va)
    part = decompress_layers(c, ka, va, range(1, 2))
    np.testing.assert_array_equal(part.keys, full.keys[1:2])
    np.testing.assert_array_equal(part.values, full.values[1:2])
    with pytest.raises(InvalidInput):
        decompress_layers(c, ka, va, range(1, 3))


def test_stats_by_hand(small_cache, small_setup):
    c, _, _ = _run(small_cache, small_setup)
    st_ = compression_stats(c)
    per_token = 2 * small_cache.shape.feature_count * 2
    assert st_.baseline_sink_bytes == 4 * per_token == st_.sink_bytes
    assert st_.baseline_middle_bytes == 264 * per_token
    want = (268 * per_token) / (st_.sink_bytes + len(c.key_payload) + len(c.value_payload))
    assert st_.compression_ratio == pytest.approx(want)
    assert st_.compression_ratio_with_header < st_.compression_ratio
    assert st_.header_bytes == len(c.to_bytes()) - st_.sink_bytes - len(c.window_bytes()) - st_.payload_bytes
    # the plans were built for a target of 8
    assert st_.quantization_ratio >= 8.0


def test_deflate_no_larger_than_identity(small_cache, small_setup):
    d, _, _ = _run(small_cache, small_setup, CompressionPolicy(4, 32, LosslessCodec(CodecKind.DEFLATE)))
    i, _, _ = _run(small_cache, small_setup, CompressionPolicy(4, 32, LosslessCodec(CodecKind.IDENTITY)))
    assert compression_stats(d).compression_ratio >= compression_stats(i).compression_ratio


def test_passthrough_when_middle_empty(small_cache, small_setup):
    policy = CompressionPolicy(4, 400)
    c, ka, va = _run(small_cache, small_setup, policy)
    assert c.passthrough and c.middle_tokens == 0
    assert decompress(c, ka, va).equals(small_cache)
    with pytest.raises(NothingToCompress):
        (ka, kp), (va, vp) = small_setup["key"], small_setup["value"]
        compress(small_cache, ka, va, policy, kp, vp, strict=True)


def test_mismatches_rejected(small_cache, small_setup):
    (ka, kp), (va, vp) = small_setup["key"], small_setup["value"]
    policy = CompressionPolicy(4, 32)
    with pytest.raises(ArtifactMismatch):
        compress(small_cache, ka, va, policy, vp, vp)
    with pytest.raises(InvalidInput):
        compress(small_cache, va, ka, policy, kp, vp)
    c = compress(small_cache, ka, va, policy, kp, vp)
    with pytest.raises(ArtifactMismatch):
        decompress(c, va, va)
    other = KvCache(small_cache.keys, small_cache.values, RopeConfig(16, base=500.0))
    with pytest.raises(ArtifactMismatch):
        compress(other, ka, va, policy, kp, vp)


def test_wider_plan_lowers_error(small_cache, small_setup):
    (ka, _), (va, _) = small_setup["key"], small_setup["value"]
    policy = CompressionPolicy(4, 32)
    s, e = segment_bounds(small_cache.shape.tokens, 4, 32)
    mid = small_cache.to_tensor()[:, :, :, s:e].astype(np.float64)
    errs = []
    for budget in (64, 256, 1024):
        plans = [allocate_budget(project(a.model, stream_rows(small_cache, n, 4, 300)), budget).with_fingerprint(
            a.fingerprint) for n, a in (("key", ka), ("value", va))]
        back = decompress(compress(small_cache, ka, va, policy, *plans), ka, va)
        errs.append(np.linalg.norm(back.to_tensor()[:, :, :, s:e] - mid))
    assert errs[0] > errs[1] > errs[2]


def _pipeline(cache, rank, target_cr=None, plans=None, policy=CompressionPolicy(4, 32)):
    from kvcodec.allocator import budget_from_ratio
    from kvcodec.bench import calibrate_streams

    cal = calibrate_streams(cache, rank)
    arts = [cal[s].artifact for s in ("key", "value")]
    if plans is None:
        budget = budget_from_ratio(cache.shape.feature_count, target_cr)
        plans = [allocate_budget(cal[s].projected, budget) for s in ("key", "value")]
    plans = [p.with_fingerprint(a.fingerprint) for p, a in zip(plans, arts)]
    return compress(cache, *arts, policy, *plans), arts


def _middle_error(cache, c, arts):
    s, e = c.bounds
    a = cache.to_tensor()[..., s:e, :].astype(np.float64)
    b = decompress(c, *arts).to_tensor()[..., s:e, :].astype(np.float64)
    return np.linalg.norm(a - b) / np.linalg.norm(a)


def _lowrank(tokens, seed=5, noise=0.0):
    from kvcodec.synth import SynthSpec, generate

    return generate(SynthSpec(CacheShape(2, 2, 32, tokens), 8 if not noise else 24, noise_sigma=noise,
                              planted_rotations=False, seed=seed))


def _fp8_cover(rank):
    return AllocationPlan(((1, ElementType.FP8_E4M3),) * rank, rank)


def test_exact_rank_fp8_error_within_e4m3_rounding():
    cache = _lowrank(400)
    c, arts = _pipeline(cache, 16, plans=[_fp8_cover(16)] * 2)
    # E4M3 rounds to 3 mantissa bits: relative error is uniform within +-2^-4
    assert _middle_error(cache, c, arts) < 2.0**-4 / np.sqrt(3)


@pytest.mark.xfail(strict=True, reason="E4M3 relative rounding alone is ~2.6% rms on this data")
def test_exact_rank_fp8_error_below_one_percent():
    cache = _lowrank(400)
    c, arts = _pipeline(cache, 16, plans=[_fp8_cover(16)] * 2)
    assert _middle_error(cache, c, arts) < 1e-2


def test_compress_is_deterministic():
    from kvcodec.container import serialize_cache

    cache = _lowrank(300, noise=0.02)
    a, _ = _pipeline(cache, 32, 8)
    b, _ = _pipeline(cache, 32, 8)
    assert serialize_cache(a) == serialize_cache(b)


def test_target_cr_met_and_deflate_helps():
    cache = _lowrank(1024, noise=0.02)
    got = {}
    for kind in CodecKind:
        c, _ = _pipeline(cache, 64, 16, policy=CompressionPolicy(4, 32, LosslessCodec(kind)))
        got[kind] = compression_stats(c).compression_ratio
    assert got[CodecKind.IDENTITY] >= 16
    assert got[CodecKind.DEFLATE] >= got[CodecKind.IDENTITY]


def test_cr_stable_when_middle_doubles():
    # no sinks, so raw bytes do not dilute the payload ratio
    policy = CompressionPolicy(0, 32)
    crs = [compression_stats(_pipeline(_lowrank(t, noise=0.02), 64, 16, policy=policy)[0]).compression_ratio
           for t in (1024, 2048)]
    assert abs(crs[1] / crs[0] - 1) < 0.10


def test_all_raw_cache_ratio_is_one():
    cache = _lowrank(30)
    c, _ = _pipeline(cache, 16, plans=[_fp8_cover(16)] * 2)
    assert c.passthrough
    st_ = compression_stats(c)
    assert st_.compression_ratio == 1.0
    assert st_.compression_ratio_with_header < 1.0
