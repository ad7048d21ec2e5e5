import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from asrq.data import toy_batches
from asrq.model import ToyConfig, build_toy, populate_stats

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def trained(config: ToyConfig, seed: int = 0):
    model = build_toy(config, seed=seed)
    return populate_stats(model, toy_batches(100 + seed, 10, 8, config.mel_bins, config.frames))


@pytest.fixture(scope="session")
def plain_toy():
    return trained(ToyConfig())


@pytest.fixture(scope="session")
def rich_toy():
    return trained(ToyConfig(residual=True, attention=True, mlp_hidden=24))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
