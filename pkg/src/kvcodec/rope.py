"""Rotary position embeddings, applied and removed per token row.

Keys are compressed in their pre-rotation form, so the codec strips the
rotation before projection and puts it back after reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput

INTERLEAVED = "interleaved"
HALF_SPLIT = "half"
_PAIRINGS = (INTERLEAVED, HALF_SPLIT)


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0
    scaling: float = 1.0
    pairing: str = INTERLEAVED

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise InvalidInput(f"head_dim must be a positive even number, got {self.head_dim}")
        if not self.base > 1:
            raise InvalidInput(f"RoPE base must exceed 1, got {self.base}")
        if not self.scaling > 0:
            raise InvalidInput(f"RoPE scaling must be positive, got {self.scaling}")
        if self.pairing not in _PAIRINGS:
            raise InvalidInput(f"pairing must be one of {_PAIRINGS}")

    def frequencies(self) -> np.ndarray:
        j = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * j / self.head_dim)

    def angles(self, positions) -> np.ndarray:
        """Rotation angle per (position, pair); linear scaling divides positions."""
        pos = np.asarray(positions, dtype=np.float64) / self.scaling
        return np.multiply.outer(pos, self.frequencies())


def _pair_views(x: np.ndarray, pairing: str):
    half = x.shape[-1] // 2
    if pairing == INTERLEAVED:
        return x[..., 0::2], x[..., 1::2]
    return x[..., :half], x[..., half:]


def _rotate(config: RopeConfig, keys, start_position: int, sign: float) -> np.ndarray:
    x = np.asarray(keys, dtype=np.float64)
    if x.shape[-1] != config.head_dim:
        raise InvalidInput(f"last dimension {x.shape[-1]} != head_dim {config.head_dim}")
    if x.ndim < 2:
        raise InvalidInput("keys must have a token axis")
    t = x.shape[-2]
    theta = sign * config.angles(start_position + np.arange(t))
    cos, sin = np.cos(theta), np.sin(theta)
    a, b = _pair_views(x, config.pairing)
    out = np.empty_like(x)
    oa, ob = _pair_views(out, config.pairing)
    oa[...] = a * cos - b * sin
    ob[...] = a * sin + b * cos
    return out


def rope_apply(config: RopeConfig, keys, start_position: int = 0) -> np.ndarray:
    """Rotate rows of ``keys`` (..., t, head_dim) for positions start, start+1, ..."""
    return _rotate(config, keys, start_position, 1.0)


def rope_undo(config: RopeConfig, keys, start_position: int = 0) -> np.ndarray:
    return _rotate(config, keys, start_position, -1.0)
