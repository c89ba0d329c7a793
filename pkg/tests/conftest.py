import pytest

_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; returns ``passed``."""

    def record(name: str, passed: bool, detail: str = "") -> bool:
        line = f"{'PASS' if passed else 'FAIL'} {name}" + (f": {detail}" if detail else "")
        _CRITERIA.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
