import numpy as np
import pytest

from kinetics.frames import SimParams

_LINES = []


def record(line: str):
    _LINES.append(line)


@pytest.fixture
def accept():
    """Record one acceptance line and assert on it."""

    def _accept(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
        print(line)
        record(line)
        assert ok, line

    return _accept


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance summary")
        for line in sorted(_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def params():
    return SimParams(h=0.5)
