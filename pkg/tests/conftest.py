import pytest

_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``record(label, passed, detail)``."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(label: str, passed: bool, detail: str):
        line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
        _RESULTS.append((label, bool(passed), detail))
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in _RESULTS:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}")
