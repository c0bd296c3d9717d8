import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lasermon.dataset import SyntheticConfig

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def small_synthetic(seed: int = 7, **kw) -> SyntheticConfig:
    """A few short samples; enough for structural and I/O checks."""
    base = dict(seed=seed, experiments_per_technique=1, samples_per_experiment=6,
                trace_length=64, min_layers=2, max_layers=4)
    base.update(kw)
    return SyntheticConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
