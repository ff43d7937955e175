import numpy as np
import pytest

from regmkt.bayes import Hypothesis
from regmkt.experiments import default_registry
from regmkt.simulation import SetupSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def baseline_data():
    return generate(SetupSpec("baseline", (-0.1, 0.8, 0.7, -0.9), 1.0, 60, seed=7))


@pytest.fixture
def hyp3():
    return Hypothesis.linear(3, noise_precision=1.0)


@pytest.fixture
def registry3():
    return default_registry(3)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance criterion's verdict; the line is printed at session end."""

    def record(number, title, ok, detail=""):
        _CRITERIA[number] = (title, bool(ok), detail)
        assert ok, f"criterion {number} ({title}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"{number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
