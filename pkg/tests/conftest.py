import pytest

_CRITERIA = {}


@pytest.fixture(scope="session")
def criterion_report():
    """``report(number, ok, detail)`` records one line for the summary; ``ok=None`` means skipped."""
    def report(number, ok, detail):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"criterion {number}: {status}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
