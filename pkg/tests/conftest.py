import numpy as np
import pytest

from rdlab import Mesh1D, default_family


@pytest.fixture(scope="session")
def fam():
    return default_family()


@pytest.fixture(scope="session")
def mesh64():
    return Mesh1D.uniform(64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_verdicts = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_verdicts] = []


@pytest.fixture
def verdict(request):
    """Record one pass/fail line per acceptance criterion; shown in the terminal summary."""
    return request.config.stash[_verdicts].append


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_verdicts, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
