import os
import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_results: dict[int, tuple[str, bool]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n, name = int(m.group(1)), m.group(2)
    failed = report.failed
    if report.when == "call" or failed or report.skipped:
        prev = _results.get(n, (name, True))[1]
        _results[n] = (name, prev and report.passed if report.when == "call" else prev and not failed and not report.skipped)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        name, ok = _results[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name.replace('_', ' ')}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
