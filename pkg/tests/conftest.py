import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from voxelkit import ACCELERATED, REFERENCE, FallbackWarning, NdImage, to_backend

settings.register_profile("voxelkit", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("voxelkit")

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _quiet_fallback():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FallbackWarning)
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def on(backend, *imgs):
    out = tuple(to_backend(i, backend) for i in imgs)
    return out[0] if len(out) == 1 else out


def pair(img):
    """The same image tagged for both backends."""
    return to_backend(img, REFERENCE), to_backend(img, ACCELERATED)


def f32(a):
    return NdImage(np.asarray(a, dtype=np.float32))


def rel_maxdiff(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b))), 1e-30)
    return float(np.max(np.abs(a - b))) / scale
