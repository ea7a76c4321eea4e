import numpy as np
import pytest

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """``criterion(n, title, ok, detail)`` records one acceptance line, then asserts ``ok``."""

    def record(n, title, ok, detail=""):
        ACCEPTANCE[n] = (title, bool(ok), detail)
        print(f"criterion {n:2d} {title}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, f"criterion {n} ({title}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        title, ok, detail = ACCEPTANCE.get(n, ("(not run to completion)", False, "see failures above"))
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title} -- {detail}")
