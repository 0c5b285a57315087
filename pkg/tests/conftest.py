import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when == "call" and "test_acceptance.py::test_c" in rep.nodeid:
                detail = dict(rep.user_properties).get("detail", "")
                rows.append((rep.nodeid.split("::")[-1], outcome, detail))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in sorted(rows):
        num = int(name[6:8])
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if outcome == 'passed' else 'FAIL'}  {detail}")
