import pytest

_ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion(capsys):
    """Record one pass/fail line for an acceptance criterion and echo it immediately."""

    def record(number, title, passed, detail):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        _ACCEPTANCE_LINES.append((number, line))
        with capsys.disabled():
            print("\n" + line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES, key=lambda item: item[0]):
            terminalreporter.write_line(line)
