import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("dvstn", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dvstn")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    from dvstn.synth import generate_preset

    root = tmp_path_factory.mktemp("tiny")
    train, test = generate_preset(root, "tiny", seed=7)
    return train, test


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.VERDICTS:
        VERDICTS = module.VERDICTS
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
