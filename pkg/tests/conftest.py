import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("suite", deadline=None, max_examples=40)
settings.load_profile("suite")

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str):
        _CRITERIA[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, _CRITERIA[number]

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
