"""Desk-scale experiment drivers behind ``kvcodec bench`` and the acceptance suite."""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np

from .allocator import DEFAULT_TYPES, DpConfig, allocate_many, budget_from_ratio, pca_only_plan
from .calib import SamplingSpec, build_calibration_matrix
from .codec import (
    CacheShape,
    CompressionPolicy,
    KvCache,
    compress,
    compression_stats,
    decompress,
    segment_bounds,
    token_rows,
)
from .container import CalibrationArtifact
from .entropy import CodecKind, LosslessCodec
from .linalg import fit_pca, mean_token_cosine, procrustes_align, project
from .quant import ElementType, bit_cost_per_token
from .rope import RopeConfig, rope_undo
from .synth import SynthSpec

SWEEP_TARGETS = (64, 32, 16, 8)
# raw binary16 added so the truncation baseline lies inside the DP's search space
SWEEP_TYPES = DEFAULT_TYPES + (ElementType.FP16,)


def sweep_spec(seed: int = 7) -> SynthSpec:
    shape = CacheShape(layers=4, kv_heads=4, head_dim=64, tokens=2048)
    return SynthSpec(shape, latent_rank=96, noise_sigma=0.05, sink_outlier_scale=1.0,
                     planted_rotations=False, rope=RopeConfig(64), seed=seed)


@dataclass(frozen=True)
class SweepRow:
    target_cr: float
    budget_bits: int
    key_bits: int
    value_bits: int
    quantization_cr: float
    cr_identity: float
    cr_deflate: float
    cr_deflate_with_header: float
    deflate_gain: float
    middle_error: float
    dp_error: float
    pca_only_error: float


@dataclass
class StreamCalibration:
    artifact: CalibrationArtifact
    projected: np.ndarray


def calibrate_streams(cache: KvCache, rank: int, sink_count: int = 4, seed: int = 0) -> dict[str, StreamCalibration]:
    """Fit both streams on every non-sink position of ``cache``."""
    n = cache.shape.tokens - sink_count
    sampling = SamplingSpec(n, sink_count, seed)
    out = {}
    for stream in ("key", "value"):
        x = build_calibration_matrix([cache], sampling, stream)
        model = fit_pca(x, min(rank, *x.shape))
        art = CalibrationArtifact.from_model(model, stream, cache.rope if stream == "key" else None, seed)
        out[stream] = StreamCalibration(art, project(art.model, x))
    return out


def _relative(err_sq: float, energy: float) -> float:
    return float(np.sqrt(err_sq / energy)) if energy else 0.0


def cr_sweep(
    cache: KvCache,
    targets=SWEEP_TARGETS,
    rank: int = 256,
    sink_count: int = 4,
    window: int = 128,
    types=SWEEP_TYPES,
    seed: int = 0,
) -> list[SweepRow]:
    cal = calibrate_streams(cache, rank, sink_count, seed)
    p = cache.shape.feature_count
    budgets = [budget_from_ratio(p, cr) for cr in targets]
    config = DpConfig(types=tuple(types))
    plans = {}
    for stream, c in cal.items():
        fp = c.artifact.fingerprint
        plans[stream] = [pl.with_fingerprint(fp) for pl in allocate_many(c.projected, budgets, config)]
    energy = sum(float((c.projected**2).sum()) for c in cal.values())

    s, e = segment_bounds(cache.shape.tokens, sink_count, window)
    orig = [token_rows(cache.keys[:, :, s:e]), token_rows(cache.values[:, :, s:e])]
    orig_energy = sum(float((x**2).sum()) for x in orig)

    rows = []
    for k, target in enumerate(targets):
        kp, vp = plans["key"][k], plans["value"][k]
        stats = {}
        restored = None
        for kind in (CodecKind.IDENTITY, CodecKind.DEFLATE):
            policy = CompressionPolicy(sink_count, window, LosslessCodec(kind))
            c = compress(cache, cal["key"].artifact, cal["value"].artifact, policy, kp, vp)
            stats[kind] = compression_stats(c)
            if kind is CodecKind.DEFLATE:
                restored = decompress(c, cal["key"].artifact, cal["value"].artifact)
        got = [token_rows(restored.keys[:, :, s:e]), token_rows(restored.values[:, :, s:e])]
        mid_err = sum(float(((a - b) ** 2).sum()) for a, b in zip(orig, got))
        pca_err = sum(pca_only_plan(c.projected, budgets[k]).expected_error for c in cal.values())
        dfl = stats[CodecKind.DEFLATE]
        rows.append(SweepRow(
            target_cr=float(target),
            budget_bits=budgets[k],
            key_bits=kp.bits_per_token,
            value_bits=vp.bits_per_token,
            quantization_cr=dfl.quantization_ratio,
            cr_identity=stats[CodecKind.IDENTITY].compression_ratio,
            cr_deflate=dfl.compression_ratio,
            cr_deflate_with_header=dfl.compression_ratio_with_header,
            deflate_gain=dfl.entropy_gain,
            middle_error=_relative(mid_err, orig_energy),
            dp_error=_relative(kp.expected_error + vp.expected_error, energy),
            pca_only_error=_relative(pca_err, energy),
        ))
    return rows


def sweep_table(rows: list[SweepRow]) -> tuple[list[str], list[tuple]]:
    return [f.name for f in fields(SweepRow)], [astuple(r) for r in rows]


# ------------------------------------------------------------ Procrustes study


def head_streams(cache: KvCache, stream: str) -> np.ndarray:
    """(layers*heads, t, d) float64, keys with RoPE removed."""
    x = np.asarray(cache.stream(stream), dtype=np.float64)
    if stream == "key" and cache.rope is not None:
        x = rope_undo(cache.rope, x, cache.start_position)
    l, h, t, d = x.shape
    return x.reshape(l * h, t, d)


def procrustes_pairs(cache: KvCache, stream: str = "key", pairs=None) -> list[tuple[int, int, float, float]]:
    """(i, j, cosine before, cosine after aligning head j onto head i)."""
    heads = head_streams(cache, stream)
    if pairs is None:
        n = heads.shape[0]
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    out = []
    for i, j in pairs:
        a, b = heads[i], heads[j]
        r = procrustes_align(a, b)
        out.append((i, j, mean_token_cosine(a, b), mean_token_cosine(a, b @ r)))
    return out


# ------------------------------------------------------------ tables


def format_table(headers, rows, fmt: str = "text") -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    cells = [[cell(v) for v in row] for row in rows]
    if fmt == "csv":
        return "\n".join([",".join(headers)] + [",".join(r) for r in cells]) + "\n"
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(headers, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(lines) + "\n"


def plan_table(plan) -> tuple[list[str], list[tuple]]:
    """Bit assignment per group: start component, size, type, payload bits, cost."""
    rows = [
        (start, size, et.label, et.payload_bits, bit_cost_per_token(size, et))
        for start, size, et in plan.spans()
    ]
    return ["start", "size", "type", "bits_per_component", "bits_per_token"], rows
