import numpy as np
import pytest

from relightlab import rng as rng_mod
from relightlab.autograd import set_debug
from relightlab.lighting import LightingEstimator


@pytest.fixture(autouse=True)
def _debug_assertions():
    set_debug(True)
    yield
    set_debug(False)


@pytest.fixture(scope="session")
def frozen_estimator():
    est = LightingEstimator(rng_mod.stream(99, "test.est"), scale_divisor=8)
    est.freeze()
    return est
