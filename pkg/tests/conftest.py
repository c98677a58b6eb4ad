import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def textured(h, w, seed=0, channels=3):
    """Smooth random texture in [0, 1]; block matching and SLIC like it."""
    from scipy import ndimage

    r = np.random.default_rng(seed)
    x = ndimage.gaussian_filter(r.random((h, w, channels)), (1.5, 1.5, 0), mode="wrap")
    x -= x.min()
    return x / x.max()


# acceptance verdicts, printed once at the end of the session
VERDICTS = {}


@pytest.fixture
def verdict():
    def record(n, status, detail=""):
        VERDICTS[n] = (status, detail)
        print(f"criterion {n}: {status} {detail}".rstrip())

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        status, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status:<8} {detail}".rstrip())
