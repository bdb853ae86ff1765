import numpy as np
import pytest

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict = {}


def record(cid: int, name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[cid] = f"criterion {cid:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    print(ACCEPTANCE_LINES[cid])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[cid])


@pytest.fixture
def rng():
    return np.random.default_rng(0)
