import numpy as np
import pytest

from cmua import backend
from cmua.generators import SyntheticDataset, make_family, synth_images


@pytest.fixture(params=backend.available())
def each_backend(request):
    """Run a test once per available convolution backend."""
    previous = backend.name()
    backend.use(request.param)
    yield request.param
    backend.use(previous)


@pytest.fixture(scope="session")
def family():
    return make_family(seed=0)


@pytest.fixture(scope="session")
def images():
    return synth_images(SyntheticDataset(seed=0), 0, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: pinned acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    from tests import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
