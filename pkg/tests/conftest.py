import numpy as np
import pytest

from narcp import kernels


@pytest.fixture(params=sorted(kernels.backends()))
def backend(request):
    return kernels.backends()[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
