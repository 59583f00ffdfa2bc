import numpy as np
import pytest
import torch

torch.set_num_threads(1)

CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def criteria(request):
    """Collects one PASS/FAIL line per acceptance criterion."""
    return request.config.stash.setdefault(CRITERIA, {})


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
