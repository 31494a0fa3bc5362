import sys
import warnings
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from potgame import PotentialOCP, scenarios, solve  # noqa: E402


@pytest.fixture(scope="session")
def exchange_scenario():
    return scenarios.load("four_agent_exchange")


@pytest.fixture(scope="session")
def exchange_spec(exchange_scenario):
    return exchange_scenario.build()


@pytest.fixture(scope="session")
def exchange_result(exchange_spec, exchange_scenario):
    return solve(PotentialOCP(exchange_spec), exchange_scenario.solver_options())


@pytest.fixture(scope="session")
def rod_scenario():
    return scenarios.load("rod_carry")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_polish_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="projection polish skipped")
        yield
