"""Transform coding for KV-cache tensors.

Calibrate a PCA basis once, allocate bits over its components by dynamic
programming, quantize in the decorrelated domain, entropy-code with DEFLATE.
"""

from .allocator import AllocationPlan, DpConfig, brute_force_allocate, dp_allocate, plan_error
from .codec import (
    CacheShape,
    CompressedCache,
    CompressionPolicy,
    KvCache,
    compress,
    compression_ratio,
    compression_stats,
    decompress,
    decompress_layers,
    kv_cache_bytes,
)
from .container import CalibrationArtifact
from .entropy import CodecKind, LosslessCodec
from .linalg import PcaModel, fit_pca, project, reconstruct
from .quant import ElementType
from .rope import RopeConfig

__version__ = "0.1.0"
