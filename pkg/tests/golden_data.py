"""Deterministic objects behind the frozen files in ``tests/golden``.

Nothing here runs an SVD or a deflate stream, so the bytes depend only on
the container code. Regenerate with ``python3 tests/golden_data.py``.
"""

from pathlib import Path

import numpy as np

from kvcodec.allocator import AllocationPlan
from kvcodec.codec import CompressionPolicy, KvCache, compress
from kvcodec.container import CalibrationArtifact, serialize_plan, serialize_tensor
from kvcodec.entropy import CodecKind, LosslessCodec
from kvcodec.quant import ElementType
from kvcodec.rope import RopeConfig

GOLDEN = Path(__file__).parent / "golden"
ROPE = RopeConfig(4, base=100.0)


def artifact(stream="key"):
    basis = np.eye(4)[:, :3]
    basis[:, 2] = [0.0, 0.0, 0.6, 0.8]
    mean = np.array([0.5, -0.25, 0.0, 1.0])
    rope = ROPE if stream == "key" else None
    return CalibrationArtifact(stream, mean, basis, np.array([3.0, 2.0, 1.0]), 9, rope, 5, 0, 1)


def plan(fingerprint):
    groups = ((1, ElementType.FP8_E4M3), (2, ElementType.INT4))
    return AllocationPlan(groups, 3, 0.125, 48, fingerprint)


def cache():
    x = ((np.arange(2 * 12 * 4).reshape(2, 1, 1, 12, 4) % 7) - 3) / 4
    return KvCache.from_tensor(x.astype(np.float16), ROPE)


def compressed():
    ka, va = artifact("key"), artifact("value")
    policy = CompressionPolicy(2, 3, LosslessCodec(CodecKind.IDENTITY))
    return compress(cache(), ka, va, policy, plan(ka.fingerprint), plan(va.fingerprint))


def build() -> dict[str, bytes]:
    ka = artifact()
    return {
        "artifact.kvta": ka.to_bytes(),
        "plan.bin": serialize_plan(plan(ka.fingerprint)),
        "tensor.kvtr": serialize_tensor(np.arange(6, dtype=np.float32).reshape(2, 3)),
        "cache.kvtc": compressed().to_bytes(),
    }


if __name__ == "__main__":
    GOLDEN.mkdir(exist_ok=True)
    for name, data in build().items():
        (GOLDEN / name).write_bytes(data)
        print(name, len(data))
