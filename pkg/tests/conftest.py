import numpy as np
import pytest
from hypothesis import settings

from s3shift.datasets import synth_dataset

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def synth():
    return synth_dataset(classes=4, per_class=50, rng=7, noise=0.5, frames=8)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)
