import pytest

_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        line = f"criterion {number} {title}: {'PASS' if passed else 'FAIL'}"
        if detail:
            line += f"  ({detail})"
        _LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
