import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "suite",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture
def make_psd():
    """Factory for random symmetric positive definite matrices."""

    def build(rng: np.random.Generator, d: int, jitter: float = 0.5) -> np.ndarray:
        root = rng.standard_normal((d, d))
        return root @ root.T + jitter * np.eye(d)

    return build
