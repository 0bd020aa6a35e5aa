import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, n=None, scale=1.0):
    shape = (3, 3) if n is None else (n, 3, 3)
    a = rng.normal(size=shape) * scale
    return a @ np.swapaxes(a, -1, -2) + 0.1 * np.eye(3)
