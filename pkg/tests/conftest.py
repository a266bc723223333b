import numpy as np
import pytest

from omniepi.autodiff import precision


@pytest.fixture(autouse=True)
def f64_mode(request):
    """Tests run in 64-bit mode unless marked ``f32``."""
    mode = "f32" if request.node.get_closest_marker("f32") else "f64"
    with precision(mode):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "f32: run the test in 32-bit mode")
    config.addinivalue_line("markers", "slow: long-running training checks")
