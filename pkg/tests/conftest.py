import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedwca.model import init_model

settings.register_profile(
    "repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")

ACCEPTANCE_LINES: list[str] = []


def small_model(seed=0, input_dim=4, hidden=(5,), bottleneck=3, classes=3, frozen=True):
    m = init_model(input_dim, hidden, bottleneck, classes, np.random.default_rng(seed))
    return m.freeze_classifier() if frozen else m


def perturbed(model, rng, scale=0.1):
    """Same layout, feature extractor nudged by Gaussian noise."""
    t = model.tensors()
    return model.with_tensors(
        {n: t[n] + scale * rng.normal(size=t[n].shape) for n in model.feature_extractor_names()}
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
