import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def toy_cfg():
    from pevcut.experiment import config_from_dict
    return config_from_dict({
        "name": "toy",
        "scenario": {"n": 2, "topology": "line", "generator": "random", "population": {"T": 2}},
        "network": {"wake": "sync"},
    })


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[k])
