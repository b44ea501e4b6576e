import pytest

from ecpr.cascade_sim import CascadeConfig, simulate
from ecpr.config import ExperimentConfig

SMALL = dict(n_users=200, n_items=1000, n_train_requests=600, n_eval_requests=150)


@pytest.fixture(scope="session")
def small_cfg() -> CascadeConfig:
    return CascadeConfig(**SMALL)


@pytest.fixture(scope="session")
def small_sim(small_cfg):
    return simulate(3, small_cfg)


@pytest.fixture(scope="session")
def small_experiment() -> ExperimentConfig:
    return ExperimentConfig(**SMALL, epochs=1, batch_size=64, seed=3).validate()


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
