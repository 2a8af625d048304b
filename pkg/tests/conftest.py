import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lvt.tensor import backend

settings.register_profile("lvt", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lvt")


@pytest.fixture(params=backend.available())
def kernel_backend(request):
    prev = backend.use_backend(request.param)
    yield request.param
    backend.use_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdict lines, which are otherwise captured."""
    from helpers import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
