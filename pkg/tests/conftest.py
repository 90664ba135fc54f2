import pytest


def pytest_configure(config):
    config._acceptance_lines = {}


@pytest.fixture()
def acceptance(request):
    """Record ``(criterion, passed, detail)``; printed in the terminal summary."""
    lines = request.config._acceptance_lines

    def record(criterion: int, passed: bool, detail: str) -> None:
        lines[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
