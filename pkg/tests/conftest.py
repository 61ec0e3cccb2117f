import numpy as np
import pytest

from proxmbrl.envs import make_fixture
from proxmbrl.proximal import population_matrices
from proxmbrl.simulate import SimConfig, generate_dataset

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def icu():
    return make_fixture("icu")


@pytest.fixture(scope="session")
def proxyrich():
    return make_fixture("proxyrich")


@pytest.fixture(scope="session")
def tiny():
    return make_fixture("tiny")


@pytest.fixture(scope="session")
def icu_data(icu):
    """Default icu dataset (N=1000, seed 7) with latent columns."""
    return generate_dataset(icu.spec, icu.behavioral, SimConfig(1000, 7, emit_latent=True), "icu")


@pytest.fixture(scope="session")
def proxyrich_pop(proxyrich):
    return population_matrices(proxyrich.spec, proxyrich.behavioral)


def random_obs_policy(rng, T, Y, U):
    from proxmbrl.core import Policy

    return Policy("obs_based", rng.dirichlet(np.ones(U), size=(T, Y)))
