import os

import numpy as np
import pytest
from hypothesis import settings

from fastqrs.simulation import DgpConfig, run_benchmark, simulate_dgp

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_data():
    """A 1500-row sample from the Monte Carlo design (one covariate)."""
    data, truth = simulate_dgp(DgpConfig(n=1500, k=2, theta_true=0.5, seed=11))
    return data


@pytest.fixture(scope="session")
def alg2_monte_carlo():
    """Fifty seeded Algorithm 2 runs at N=10^4, K=2, true theta 0.5."""
    return run_benchmark([(10_000, 2)], ["alg2"], 50, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(number: int, name: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE[number] = line
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
