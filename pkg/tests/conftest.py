import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number this test covers")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"passed": True, "title": marker.kwargs.get("title", ""), "notes": []})
    if not rep.passed:
        entry["passed"] = False
    entry["notes"] += [str(v) for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["passed"] else "FAIL"
        notes = "; ".join(dict.fromkeys(e["notes"]))
        terminalreporter.write_line(f"criterion {n} {status}: {e['title']}" + (f" ({notes})" if notes else ""))
