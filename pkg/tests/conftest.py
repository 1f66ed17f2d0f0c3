from __future__ import annotations

import numpy as np
import pytest

from expost import SignalSpace, Uniform, make_grid


@pytest.fixture
def unit():
    return SignalSpace(0.0, 1.0)


@pytest.fixture
def uniform(unit):
    return Uniform(unit)


@pytest.fixture
def grid21(unit):
    return make_grid(unit, 21)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_log():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(criterion: int, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
