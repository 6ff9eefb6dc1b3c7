from __future__ import annotations

import numpy as np
import pytest

from fuselab.config import DESK
from fuselab.geometry import cached_template
from fuselab.synthdata import SceneConfig, generate_sample, sample_rng, write_split
from fuselab.tensorops import ParamStore
from fuselab.trainer import make_batch


@pytest.fixture(scope="session")
def profile():
    return DESK


@pytest.fixture(scope="session")
def template():
    return cached_template("desk")


@pytest.fixture(scope="session")
def scene_config(profile, template):
    return SceneConfig(profile, template)


@pytest.fixture(scope="session")
def samples(scene_config):
    return [generate_sample(sample_rng(7, i), scene_config) for i in range(4)]


@pytest.fixture(scope="session")
def sample(samples):
    return samples[0]


@pytest.fixture
def batch(samples, template):
    return make_batch(samples[:2], template)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def params64():
    return ParamStore(0, np.float64)


@pytest.fixture(scope="session")
def tiny_split(tmp_path_factory):
    """Eight clean training scenes."""
    d = tmp_path_factory.mktemp("tiny_train")
    write_split(d, 3, 8)
    return d


@pytest.fixture(scope="session")
def tiny_test_split(tmp_path_factory):
    """Four scenes under every condition, disjoint from the training indices."""
    d = tmp_path_factory.mktemp("tiny_test")
    write_split(d, 4, 4, ("clean", "noisy_depth", "dropout", "dark"), offset=1000)
    return d
