"""Prints a one-line verdict per acceptance criterion at the end of the run."""

from __future__ import annotations

import pytest

_VERDICTS: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    criterion = item.get_closest_marker("criterion")
    if criterion is None:
        return
    label = criterion.args[0]
    details = getattr(item, "acceptance_details", "")
    if report.when == "call" or (report.when == "setup" and report.failed):
        _VERDICTS[label] = ("PASS" if report.passed else "FAIL", details)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion covered by the test")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, (verdict, details) in _VERDICTS.items():
        terminalreporter.write_line(f"{verdict}  {label}" + (f"  [{details}]" if details else ""))


@pytest.fixture
def details(request):
    """Attach a short measurement summary to the acceptance line of the running test."""
    def note(text: str) -> None:
        request.node.acceptance_details = text
    return note
