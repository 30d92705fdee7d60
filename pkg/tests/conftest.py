import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kvcodec.calib import SamplingSpec, calibrate, plan_stream, build_calibration_matrix
from kvcodec.codec import CacheShape
from kvcodec.rope import RopeConfig
from kvcodec.synth import SynthSpec, generate

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.fixture(scope="session")
def small_cache():
    spec = SynthSpec(CacheShape(2, 2, 16, 300), latent_rank=12, noise_sigma=0.02,
                     sink_outlier_scale=4.0, rope=RopeConfig(16), seed=11)
    return generate(spec)


@pytest.fixture(scope="session")
def small_setup(small_cache):
    """Artifacts and plans for both streams of ``small_cache``."""
    sampling = SamplingSpec(small_cache.shape.tokens - 4, 4, 0)
    out = {}
    for stream in ("key", "value"):
        art = calibrate([small_cache], stream, 32, sampling)
        rows = build_calibration_matrix([small_cache], sampling, stream)
        out[stream] = (art, plan_stream(art, rows, 8.0))
    return out


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
