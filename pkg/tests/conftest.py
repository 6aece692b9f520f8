"""Prints one pass/fail line per acceptance criterion after the run."""
from collections import defaultdict

import pytest

_results = defaultdict(list)
_names = {}
_notes = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    _names[number] = title
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _results[number].append(rep.passed)
        _notes[number].extend(v for k, v in item.user_properties if k == "measured")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        ok = all(_results[number])
        note = "; ".join(_notes[number])
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {_names[number]}"
        terminalreporter.write_line(line + (f"  [{note}]" if note else ""))
