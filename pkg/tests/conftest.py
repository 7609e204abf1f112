"""Acceptance bookkeeping: one PASS/FAIL line per criterion in the summary.

Tests marked ``@pytest.mark.criterion(n)`` contribute to criterion ``n``;
a criterion passes when every contributing test passed. Measured values
attached with the ``measured`` fixture are printed next to the verdict.
"""

import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def measured(request):
    """``measured(key, value)`` attaches a measurement to the current test."""

    def add(key, value):
        request.node.user_properties.append((key, value))

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        entry = _CRITERIA.setdefault(marker.args[0], {"ok": True, "tests": 0, "notes": []})
        entry["tests"] += 1
        entry["ok"] &= report.passed
        if not report.passed:
            entry["notes"].append(f"{item.name} {report.outcome}")
        entry["notes"] += [f"{k}={_fmt(v)}" for k, v in item.user_properties]


def _fmt(value):
    return f"{value:.4g}" if isinstance(value, float) else str(value)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        verdict = "PASS" if entry["ok"] else "FAIL"
        notes = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  ({entry['tests']} checks) "
                                    f"{notes}")
