"""Collects acceptance verdicts and prints them at the end of the run."""

import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict(request):
    """Call ``verdict(label, passed, detail)`` once per criterion."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(label: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  {label}  {detail}"
        VERDICTS.append(line)
        with capman.global_and_fixture_disabled():
            print(f"\n{line}")

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
