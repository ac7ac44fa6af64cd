import pytest

from distilab.harness import ExperimentConfig, run_pipeline

LARGE = ExperimentConfig(N=100_000, Jstar=100_000)


@pytest.fixture(scope="session")
def large_runs():
    """Full pipeline at N = J* = 1e5 on seeds 0..4, shared by the slow checks."""
    return [run_pipeline(LARGE, seed) for seed in LARGE.seeds]
