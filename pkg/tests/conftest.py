"""Shared fixtures: tiny model configs and small synthetic datasets."""
import numpy as np
import pytest

from trasend.data import SyntheticSpec, extract_samples, generate_synthetic_dataset
from trasend.model import ModelConfig

SENSORS = (("acc", 3), ("gyro", 3))


def tiny_config(variant="trasend", **kw) -> ModelConfig:
    """The small architecture used by the fast end-to-end tests."""
    base = dict(sensors=SENSORS, num_classes=4, variant=variant, conv_filters=8, gru_units=16, heads=2, d_k=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    """3 users x 3 classes x 4 windows; cheap enough for per-test training."""
    return generate_synthetic_dataset(SyntheticSpec(users=3, classes=3, samples_per_class=4, seed=7))


@pytest.fixture(scope="session")
def small_samples(small_dataset):
    return extract_samples(small_dataset)


# one "CRITERION n: PASS|FAIL ..." line per acceptance criterion, repeated in the summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
