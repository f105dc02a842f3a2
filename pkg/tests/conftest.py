from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from clusterqr.montecarlo import McConfig, generate_dgp  # noqa: E402
from clusterqr.solver import QuantileGrid, fit_process  # noqa: E402


@pytest.fixture(scope="session")
def mc_data():
    """A moderately sized dataset from the Monte Carlo design."""
    return generate_dgp(McConfig(n_clusters=30, rho=0.5, seed=11), 0)


@pytest.fixture(scope="session")
def mc_fit(mc_data):
    grid = QuantileGrid([0.25, 0.5, 0.75])
    return fit_process(mc_data, grid)


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    if mod is None or not mod.REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for number in mod.CRITERIA:
        terminalreporter.write_line(mod.REPORT.get(number, f"C{number} not run"))
