import numpy as np
import pytest

# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool | None, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"[{status}] {n}. {title}: {detail}")
