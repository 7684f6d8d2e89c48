import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from smodice import datasets, envs
from smodice.discriminator import CoverageWarning

FROZEN = Path(__file__).parent / "oracles" / "frozen.json"


@pytest.fixture(scope="session")
def frozen():
    return json.loads(FROZEN.read_text())


@pytest.fixture(scope="session")
def figure2a_data():
    exp = envs.figure2a()
    true = exp.imitator_mdp()
    data = datasets.collect(true, envs.random_behavior_policy(exp.grid), 10000, seed=0)
    return exp, true, data


@pytest.fixture(scope="session")
def figure2b_data():
    exp = envs.figure2b()
    true = exp.imitator_mdp()
    data = datasets.collect(true, envs.random_behavior_policy(exp.grid), 10000, seed=0)
    return exp, true, data


def one_hot(n, idx):
    v = np.zeros(n)
    v[idx] = 1.0
    return v


@pytest.fixture(autouse=True)
def _quiet_coverage():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CoverageWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    from tests_support import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
