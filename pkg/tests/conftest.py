import numpy as np
import pytest

# (criterion number, passed, detail) rows filled in by test_acceptance
ACCEPTANCE = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def record():
    def add(num, ok, detail):
        ACCEPTANCE.append((num, bool(ok), detail))
        print(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    return add


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
