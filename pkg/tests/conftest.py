import pytest

# (criterion number, passed, detail) collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the terminal summary prints them all."""

    def record(number: int, passed: bool, detail: str):
        ACCEPTANCE_LINES.append((number, bool(passed), detail))
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
