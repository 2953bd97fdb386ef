import pytest

ACCEPTANCE_LINES: list = []


@pytest.fixture
def report_criterion():
    """Record one pass/fail line per acceptance criterion for the summary."""
    def record(number: int, title: str, passed: bool, detail: str):
        ACCEPTANCE_LINES.append((number, f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}: {detail}"))
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
