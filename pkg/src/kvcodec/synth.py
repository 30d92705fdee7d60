"""Synthetic KV caches with known structure.

Each (layer, head) stream is ``z @ W + noise`` for a per-token latent
``z`` of dimension ``k``. With planted rotations every head shares one base
map, ``W = W0 @ R`` with a Haar-random orthogonal ``R`` per head, so heads
agree up to rotation. Without them each head draws its own ``W``. The first
few positions get a fixed large offset (attention-sink outliers) and keys
are finally rotated by RoPE at their absolute positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import CacheShape, KvCache
from .errors import InvalidInput
from .rope import RopeConfig, rope_apply

SINK_POSITIONS = 4


@dataclass(frozen=True)
class SynthSpec:
    shape: CacheShape
    latent_rank: int
    noise_sigma: float = 0.0
    sink_outlier_scale: float = 1.0
    planted_rotations: bool = True
    rope: RopeConfig | None = None
    seed: int = 0
    start_position: int = 0

    def __post_init__(self):
        if not 1 <= self.latent_rank <= self.shape.feature_count:
            raise InvalidInput(f"latent_rank must be in [1, {self.shape.feature_count}]")
        if self.noise_sigma < 0:
            raise InvalidInput("noise_sigma must be non-negative")
        if self.sink_outlier_scale < 1:
            raise InvalidInput("sink_outlier_scale must be at least 1")
        if self.rope is not None and self.rope.head_dim != self.shape.head_dim:
            raise InvalidInput("RoPE head_dim must match the cache head_dim")


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian, sign-corrected)."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _stream(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    l, h, d, t = spec.shape.layers, spec.shape.kv_heads, spec.shape.head_dim, spec.shape.tokens
    k = spec.latent_rank
    z = rng.standard_normal((t, k))
    base = rng.standard_normal((k, d)) / np.sqrt(k)
    out = np.empty((l, h, t, d))
    for layer in range(l):
        for head in range(h):
            if spec.planted_rotations:
                w = base @ random_orthogonal(d, rng)
            else:
                w = rng.standard_normal((k, d)) / np.sqrt(k)
            out[layer, head] = z @ w
    if spec.noise_sigma:
        out += spec.noise_sigma * rng.standard_normal(out.shape)
    # drawn unconditionally so the scale never shifts later draws
    offset = rng.standard_normal((l, h, 1, d))
    if spec.sink_outlier_scale > 1:
        out[:, :, :SINK_POSITIONS] += (spec.sink_outlier_scale - 1.0) * offset
    return out


def generate(spec: SynthSpec, dtype=np.float16) -> KvCache:
    """Draw a cache; identical ``spec`` gives identical bytes."""
    rng = np.random.Generator(np.random.Philox(spec.seed))
    keys = _stream(spec, rng)
    values = _stream(spec, rng)
    if spec.rope is not None:
        keys = rope_apply(spec.rope, keys, spec.start_position)
    dtype = np.dtype(dtype)
    if dtype == np.float16 and max(np.abs(keys).max(), np.abs(values).max()) > 65504:
        raise InvalidInput("synthetic values overflow binary16")
    return KvCache(keys.astype(dtype), values.astype(dtype), spec.rope, spec.start_position)
