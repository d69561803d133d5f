import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import phi4flow  # noqa: F401  (enables binary64 in jax)

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


_CRITERIA = {}


@pytest.fixture(scope="session")
def criterion_log():
    """Collects one verdict line per acceptance criterion; printed in the terminal summary."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
