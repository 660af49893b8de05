import os

import hypothesis
import numpy as np
import pytest

from config import NetConfig, SyntheticSceneConfig
from data_io import gen_synthetic

np.seterr(all="warn")

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net_config():
    """Five-level layout with very narrow channels, for fast network tests"""
    return NetConfig(channels=(4, 4, 4, 4, 4), head_channels=4)


@pytest.fixture
def scene_32():
    return gen_synthetic(SyntheticSceneConfig(height=32, width=32, region_range=(2, 3), seed=7))


@pytest.fixture
def scene_64():
    return gen_synthetic(SyntheticSceneConfig(height=64, width=64, seed=3))
