import sys

import hypothesis
import numpy as np
import pytest

from stable_manifold.pendulum import lq1, pendulum_problem

np.seterr(all="warn", under="ignore")

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture(scope="session")
def lq():
    return lq1()


@pytest.fixture(scope="session")
def pend():
    return pendulum_problem(rescaled=True)


@pytest.fixture(scope="session")
def pend_raw():
    return pendulum_problem(rescaled=False)


def pytest_terminal_summary(terminalreporter):
    # one line per acceptance criterion, collected by tests/test_acceptance.py
    lines = []
    for name, mod in list(sys.modules.items()):
        if name.endswith("test_acceptance"):
            lines = getattr(mod, "LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
