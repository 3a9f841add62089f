import numpy as np
import pytest

from hardness_guard.data import SyntheticDatasetSpec, generate_dataset
from hardness_guard.evaluation import ExperimentPlan, Workbench
from hardness_guard.expectations import load
from hardness_guard.snapshots import TrainConfig


@pytest.fixture(scope="session")
def bench():
    """The default desk-scale experiment; trained once per session."""
    return Workbench(ExperimentPlan())


@pytest.fixture(scope="session")
def expected():
    return load()


SMALL_DATA = SyntheticDatasetSpec(num_classes=3, dim=4, samples_per_class=60, cluster_spread=1.0, cluster_separation=2.5, seed=7)
SMALL_TRAIN = TrainConfig(epochs=12, learning_rate=0.1, lr_decay=0.95, momentum=0.9, batch_size=16, hidden=8, seed=7)


@pytest.fixture(scope="session")
def small_pools():
    return generate_dataset(SMALL_DATA)


@pytest.fixture(scope="session")
def small_model(small_pools):
    from hardness_guard.snapshots import train_with_snapshots

    return train_with_snapshots(small_pools[0], SMALL_TRAIN, num_classes=SMALL_DATA.num_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
