"""Calibration data assembly and reconstruction-error reporting."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .allocator import AllocationPlan, DpConfig, allocate_budget, budget_from_ratio, pca_only_plan
from .codec import KvCache, quantize_roundtrip, token_rows
from .container import CalibrationArtifact
from .errors import InvalidInput
from .linalg import PcaModel, as_matrix, fit_pca, project, reconstruct
from .rope import rope_undo


@dataclass(frozen=True)
class SamplingSpec:
    sample_count: int
    exclude_sink_count: int = 4
    seed: int = 0
    layer_concat_width: int | None = None

    def __post_init__(self):
        if self.sample_count < 1:
            raise InvalidInput("sample_count must be positive")
        if self.exclude_sink_count < 0:
            raise InvalidInput("exclude_sink_count must be non-negative")
        if self.layer_concat_width is not None and self.layer_concat_width < 1:
            raise InvalidInput("layer_concat_width must be positive")


def sampler(seed: int) -> np.random.Generator:
    """The calibration PRNG: numpy's Philox4x64 counter-based generator."""
    return np.random.Generator(np.random.Philox(seed))


def layer_groups(layers: int, width: int | None) -> list[range]:
    width = layers if width is None else min(width, layers)
    return [range(s, min(s + width, layers)) for s in range(0, layers, width)]


def sample_positions(caches: list[KvCache], spec: SamplingSpec) -> list[tuple[int, int]]:
    """(cache index, position) pairs drawn without replacement, sinks excluded."""
    pool = [(ci, pos) for ci, c in enumerate(caches) for pos in range(spec.exclude_sink_count, c.shape.tokens)]
    if spec.sample_count > len(pool):
        raise InvalidInput(f"requested {spec.sample_count} samples from a pool of {len(pool)} non-sink positions")
    order = sampler(spec.seed).permutation(len(pool))[: spec.sample_count]
    return [pool[i] for i in order]


def calibration_rows(cache: KvCache, stream: str, layers: range | None = None) -> np.ndarray:
    """All token rows of one stream (keys de-rotated), restricted to ``layers``."""
    x = cache.stream(stream)
    if layers is not None:
        x = x[layers.start : layers.stop]
    x = np.asarray(x, dtype=np.float64)
    if stream == "key" and cache.rope is not None:
        x = rope_undo(cache.rope, x, cache.start_position)
    return token_rows(x)


def build_calibration_matrix(
    caches: list[KvCache], spec: SamplingSpec, stream: str, layer_group: int = 0
) -> np.ndarray:
    """Sampled rows (n x p) for one stream and one group of concatenated layers."""
    if stream not in ("key", "value"):
        raise InvalidInput(f"stream must be 'key' or 'value', got {stream!r}")
    if not caches:
        raise InvalidInput("no caches given")
    first = caches[0].shape
    for c in caches[1:]:
        s = c.shape
        if (s.layers, s.kv_heads, s.head_dim) != (first.layers, first.kv_heads, first.head_dim):
            raise InvalidInput("calibration caches disagree on layers/heads/head_dim")
    groups = layer_groups(first.layers, spec.layer_concat_width)
    if not 0 <= layer_group < len(groups):
        raise InvalidInput(f"layer_group {layer_group} outside [0, {len(groups)})")
    layers = groups[layer_group]
    picks = sample_positions(caches, spec)
    rows = [calibration_rows(c, stream, layers) for c in caches]
    out = np.empty((len(picks), len(layers) * first.kv_heads * first.head_dim))
    for k, (ci, pos) in enumerate(picks):
        out[k] = rows[ci][pos]
    return out


@dataclass(frozen=True)
class ErrorReport:
    """Per-row relative errors ``||x - x_hat|| / ||x||`` and their aggregate.

    ``overall`` is the relative Frobenius error. Without zero rows it equals
    the square root of the ``||x||^2``-weighted mean of squared per-row
    errors. Zero-norm rows report 0 and are flagged in ``degenerate``; their
    absolute error still counts toward ``overall``.
    """

    overall: float
    per_row: np.ndarray
    degenerate: np.ndarray
    size_curve: tuple[tuple[int, float], ...] = ()

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"overall_relative_error {self.overall:.6e}\n")
        buf.write(f"rows {self.per_row.shape[0]} degenerate {int(self.degenerate.sum())}\n")
        if self.per_row.size:
            q = np.quantile(self.per_row, [0.0, 0.5, 0.9, 1.0])
            buf.write("row_error min {:.6e} median {:.6e} p90 {:.6e} max {:.6e}\n".format(*q))
        for n, err in self.size_curve:
            buf.write(f"calibration_size {n} error {err:.6e}\n")
        return buf.getvalue()

    def to_csv(self) -> str:
        lines = ["position,relative_error,degenerate"]
        lines += [f"{i},{e:.9e},{int(dg)}" for i, (e, dg) in enumerate(zip(self.per_row, self.degenerate))]
        return "\n".join(lines) + "\n"


def reconstruct_rows(model: PcaModel, plan: AllocationPlan | None, x) -> np.ndarray:
    """project -> (quantize per plan) -> reconstruct; ``plan=None`` is truncation only."""
    d = project(model, x)
    if plan is not None:
        d = quantize_roundtrip(d, plan, model.rank)
    return reconstruct(model, d)


def reconstruction_error_curve(model: PcaModel, plan: AllocationPlan | None, eval_rows) -> ErrorReport:
    x = as_matrix(eval_rows, "eval")
    if x.shape[1] != model.feature_count:
        raise InvalidInput(f"eval has {x.shape[1]} columns, model expects {model.feature_count}")
    err = x - reconstruct_rows(model, plan, x)
    num = np.linalg.norm(err, axis=1)
    den = np.linalg.norm(x, axis=1)
    degenerate = den == 0
    per_row = np.where(degenerate, 0.0, num / np.where(degenerate, 1.0, den))
    total = np.linalg.norm(x)
    overall = float(np.linalg.norm(err) / total) if total else 0.0
    return ErrorReport(overall, per_row, degenerate)


def calibration_size_curve(
    train_rows, eval_rows, sizes, rank: int, method: str = "exact", seed: int = 0
) -> tuple[tuple[int, float], ...]:
    """Held-out PCA truncation error when fitting on the first ``n`` training rows."""
    train = as_matrix(train_rows, "train")
    points = []
    for n in sizes:
        if n > train.shape[0]:
            raise InvalidInput(f"calibration size {n} exceeds {train.shape[0]} training rows")
        model = fit_pca(train[:n], min(rank, n, train.shape[1]), method=method, seed=seed)
        points.append((int(n), reconstruction_error_curve(model, None, eval_rows).overall))
    return tuple(points)


def calibrate(
    caches: list[KvCache],
    stream: str,
    rank: int,
    sampling: SamplingSpec,
    method: str = "exact",
    power_iterations: int = 8,
    layer_group: int = 0,
) -> CalibrationArtifact:
    """Sample, fit PCA and package the result as a storable artifact."""
    x = build_calibration_matrix(caches, sampling, stream, layer_group)
    model = fit_pca(x, min(rank, *x.shape), method=method, power_iterations=power_iterations, seed=sampling.seed)
    layers = layer_groups(caches[0].shape.layers, sampling.layer_concat_width)[layer_group]
    rope = caches[0].rope if stream == "key" else None
    return CalibrationArtifact.from_model(model, stream, rope, sampling.seed, layers.start, len(layers))


def plan_stream(artifact, calib_rows, target_cr: float, mode: str = "dp", config=None, feature_bits: int = 16):
    """Bit allocation for one artifact on its calibration rows, tagged with its fingerprint."""
    d = project(artifact.model, calib_rows)
    budget = budget_from_ratio(artifact.feature_count, target_cr, feature_bits)
    if mode == "dp":
        plan = allocate_budget(d, budget, config or DpConfig())
    elif mode == "pca-only":
        plan = pca_only_plan(d, budget, feature_bits)
    else:
        raise InvalidInput(f"unknown planning mode {mode!r}")
    return plan.with_fingerprint(artifact.fingerprint)
