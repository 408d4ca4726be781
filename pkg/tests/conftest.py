import numpy as np
import pytest

from drim.synth import GeneratorConfig, generate, split


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cohort():
    """A quick cohort for plumbing tests (not for quality thresholds)."""
    batch = generate(GeneratorConfig(n_patients=120, seed=3))
    train, test = split(batch, [0.75, 0.25], 3)
    return batch, train, test


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
