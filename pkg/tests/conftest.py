import numpy as np
import pytest

from cdguide.schedule import NoiseSchedule
from cdguide.score import AnalyticScore, GaussianMixture
from cdguide.sets import Box


@pytest.fixture
def ve10():
    return NoiseSchedule.ve(1e-8, 10.0)


@pytest.fixture
def prior_1d():
    return GaussianMixture.gaussian([1.0], [[4.0]])


@pytest.fixture
def score_1d(ve10, prior_1d):
    return AnalyticScore(ve10, prior_1d)


@pytest.fixture
def S3():
    return Box.interval(3.0, np.inf)


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the test still asserts on ``ok``."""

    def record(number, ok, detail):
        line = f"CRITERION {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
