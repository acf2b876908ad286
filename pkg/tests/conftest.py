import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=400, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def world():
    from bezierbot.harness import World

    return World()


# acceptance criteria outcomes, printed as one line each at the end of the run
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_report():
    def record(number: int, title: str, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (title, bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}: {detail}")
