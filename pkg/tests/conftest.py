import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from avse.config import preset
from avse.kernel import make_rng

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return preset("tiny")[0]


@pytest.fixture(scope="session")
def paper_cfg():
    return preset("paper")[0]


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300))
