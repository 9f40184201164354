import warnings

import pytest

from morphoeval import _kernels

ACCEPTANCE_LINES: list[str] = []

BACKENDS = ["numpy"] + (["numba"] if _kernels.NUMBA is not None else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run a test once per available kernel backend."""
    previous = _kernels.backend
    _kernels.backend = _kernels.select_backend(request.param)
    yield request.param
    _kernels.backend = previous


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
