import numpy as np
import pytest

from draec.config import SceneOptions, StftConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def stft_cfg():
    return StftConfig()


@pytest.fixture(scope="session")
def short_scene():
    """2 s double-talk scene with every stem active, shared by slow-ish tests."""
    from draec.scene import make_scene
    opts = SceneOptions(rt60=0.3, ser_db=-10, sir_db=0, snr_db=30, duration_s=2.0, seed=7)
    return make_scene(opts)


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
