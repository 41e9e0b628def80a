#!/usr/bin/env python3
"""
Shared pytest fixtures and options.

Slow acceptance runs (full default scene) are skipped unless --runslow
is given. Hypothesis profiles: "default", "fast" and "thorough"; pick one
with HYPOTHESIS_PROFILE.
"""

import os
import shutil
import tempfile
from pathlib import Path

import hypothesis
import numpy as np
import pytest

from core.pscnet import ModelConfig
from core.synthlab import SceneSpec, gen_scene
from core.trainer import RunConfig, TrainConfig

np.seterr(all="warn")

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=500, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-scene acceptance run (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def temp_dir():
    """Create temporary directory for test files."""
    temp_path = tempfile.mkdtemp()
    yield Path(temp_path)
    shutil.rmtree(temp_path, ignore_errors=True)


SMALL_SCENE = dict(
    fine_n=24, fine_step=0.1, coarse_n=8, coarse_step=0.3, days=4, spinup_steps=8,
    correlation_length=3.0, n_stations=6, gap_fraction=0.1,
)


@pytest.fixture(scope="session")
def small_spec():
    """A 24x24 / 8x8 scene over four days."""
    return SceneSpec(**SMALL_SCENE).validate()


@pytest.fixture(scope="session")
def small_scene(small_spec):
    return gen_scene(small_spec)


def tiny_model(**changes) -> ModelConfig:
    base = dict(in_channels=12, base_channels=4, window_length=3, tcn_dilations=(1, 2),
                num_stages=1, stage_dilations=(1,), se_reduction=2, ffn_expansion=2)
    base.update(changes)
    return ModelConfig(**base).validate()


@pytest.fixture
def tiny_config():
    """Small model, two epochs, 4x4 patches, 64-bit."""
    return RunConfig(
        model=tiny_model(),
        train=TrainConfig(epochs=2, batch_size=8, patch_size=4, patch_stride=2,
                          patience=2, dtype="float64").validate(),
    )
