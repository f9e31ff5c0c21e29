import numpy as np
import pytest
from hypothesis import settings

from octmosaic.core import Image2D
from octmosaic.phantoms import vessel_phantom

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def phantom400():
    return vessel_phantom(400, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_noise(shape, sigma=3.0, seed=0):
    """Band-limited random image rescaled to [0, 1]."""
    from scipy import ndimage
    r = np.random.default_rng(seed).random(shape)
    s = ndimage.gaussian_filter(r, sigma)
    s = (s - s.min()) / (s.max() - s.min())
    return Image2D(s)


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
