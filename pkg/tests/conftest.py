from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sdopt import data
from sdopt.scenario import ScenarioVector, equal_weight_benchmark

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def a8():
    return data.appendix_8asset().matrix


@pytest.fixture(scope="session")
def a5():
    return data.appendix_5asset().matrix


@pytest.fixture(scope="session")
def bench8(a8):
    return equal_weight_benchmark(a8)


@pytest.fixture(scope="session")
def bench5(a5):
    return equal_weight_benchmark(a5)


def vec(*xs, probs=None) -> ScenarioVector:
    return ScenarioVector(np.array(xs, dtype=float), probs)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
