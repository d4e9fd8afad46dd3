import pytest

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def record_criterion():
    """Log a named acceptance outcome; the terminal summary lists them all."""

    def record(title: str, passed: bool, detail: str) -> None:
        _ACCEPTANCE.append((title, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {title}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for title, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {title}: {detail}")
