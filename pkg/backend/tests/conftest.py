"""
Shared fixtures for the backend test suite
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add backend directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from config import Config, GcfatConfig, PipelineConfig, SceneConfig
from utils.scene import camera_from_config


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch):
    """Keep AYDIV_* variables of the developer's shell out of the tests."""
    for name in ("CONFIG_PATH", "SEED", "OUT_DIR", "JOBS"):
        monkeypatch.setattr(Config, name, None)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def cfg():
    return PipelineConfig().validate()


@pytest.fixture
def tiny_gcfat():
    """16 x 16 image, 4 x 4 patch tokens, 2 x 2 windows, two stages of one block"""
    return GcfatConfig(
        embed_dim=8, num_heads=2, window=(2, 2), patch_size=4, depths=(1, 1), mlp_ratio=2, fusion_hw=(4, 4)
    )


@pytest.fixture
def small_camera():
    return camera_from_config(SceneConfig(image_hw=(16, 16)))


@pytest.fixture
def camera():
    return camera_from_config(SceneConfig())
