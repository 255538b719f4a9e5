import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from arcnet.datasets import SyntheticSpec, synth_generate  # noqa: E402
from arcnet.training import TrainConfig, train  # noqa: E402

# 4 classes x 50 windows, 2 IMUs: 200 windows before the subject split
OVERFIT_SPEC = SyntheticSpec(n_imu=2, n_classes=4, windows_per_class=50, seed=0)
OVERFIT_CONFIG = TrainConfig(dataset="synth", epochs=25, batch_size=32, seed=0, ensemble_k=5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def overfit_data():
    return synth_generate(OVERFIT_SPEC)


@pytest.fixture(scope="session")
def overfit_run(overfit_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit_a")
    return train(OVERFIT_CONFIG, overfit_data, out)
