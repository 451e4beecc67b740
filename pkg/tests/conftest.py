import logging

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _quiet_batch_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="mutualvpr.trainer")


@pytest.fixture(scope="session")
def trained_k3():
    """A short K=3 training run on a 40-cell occluded world."""
    from mutualvpr.config import RunConfig
    from mutualvpr.experiments import make_synthetic
    from mutualvpr.trainer import train

    cfg = RunConfig(num_cells=40, epochs=4, iterations_per_epoch=100, group_count=4, lr_encoder=1e-3, seed=5)
    data = make_synthetic(cfg)
    logging.getLogger("mutualvpr.trainer").setLevel(logging.ERROR)
    return train(data.train, cfg.train_config()), data


VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)
