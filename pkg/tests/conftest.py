import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from streamfl.distributions import RegimeSet, build_regimes
from streamfl.rng import substream

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_regimes():
    """Ten sparse regimes over classes {0, 1, 2} of R = 10, sticky transitions."""
    regimes = build_regimes(substream(7, 0, "regimes"), 10, 10, 0.5, [0, 1, 2])
    return RegimeSet.build(regimes, 1.0)


@pytest.fixture
def iid_regimes():
    """One fixed regime: batches are i.i.d. multinomial draws."""
    return RegimeSet.build(np.array([[0.2, 0.3, 0.5]]), 0.0)
