"""Shared fixtures: hypothesis profile and a small generated dataset."""

from datetime import timedelta

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from privpool import tensor as T
from privpool.data import Dataset, GenConfig, generate

settings.register_profile(
    "default", max_examples=25, deadline=timedelta(seconds=30),
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def float64_default():
    """Every test starts from the float64 default dtype."""
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float64)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """Small 3-class dataset shared by data/train/eval/cli tests."""
    out = tmp_path_factory.mktemp("tiny_data")
    generate(GenConfig(num_classes=3, n_per_class=4, bias=0.9, seed=5), out)
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return Dataset.load(tiny_dataset_dir)
