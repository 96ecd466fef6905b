import numpy as np
import pytest

from splitaudit.cnn import FCLayer, ModelConfig, ModelParams
from splitaudit.phe import GLOBAL_COUNTERS


@pytest.fixture(scope="session", autouse=True)
def no_rotations_anywhere():
    """Every evaluator reports to GLOBAL_COUNTERS; none may ever rotate."""
    yield
    snap = GLOBAL_COUNTERS.snapshot()
    assert snap["rotations"] == 0, snap


@pytest.fixture
def toy_config():
    return ModelConfig.from_preset("single", input_len=6, channels=1, kernel_len=4, stride=2,
                                   pool_size=2, num_classes=2)


@pytest.fixture
def toy_params():
    # conv w=[1,0,-1,2], b=1; the fc layer just passes the single pooled value through
    return ModelParams(np.array([[1.0, 0.0, -1.0, 2.0]]), np.array([1.0]),
                       (FCLayer(np.array([[1.0], [-1.0]]), np.zeros(2), False),))
