import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fsfg.datagen import GeneratorConfig, generate
from fsfg.episodes import make_split

settings.register_profile("fsfg", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fsfg")


@pytest.fixture(scope="session")
def small_data():
    return generate(GeneratorConfig(num_classes=6, samples_per_class=8, inter_class_gap=1.0, seed=3))


@pytest.fixture(scope="session")
def small_split(small_data):
    return make_split(small_data, 0.5, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = sorted(getattr(config, "_acceptance_lines", []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
