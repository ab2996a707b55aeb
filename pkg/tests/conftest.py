"""Shared toy fixtures: everything here is small enough to run a full pipeline in seconds."""
from pathlib import Path

import numpy as np
import pytest

from lorun import log
from lorun.denoisers import DenoiserConfig, init_weights
from lorun.operators import CsOperator

REPO = Path(__file__).resolve().parent.parent
CONFIGS = REPO / "configs"

TINY_CONFIG = """\
task = "cs"
cs_ratio = 0.25
cs_block = 8
cs_learnable = true
algorithm = "pgd"
arch = "unet"
base_channels = 4
depth = 1
stages = 2
gamma = 25.0
seed = 0
epochs = 1
batch_size = 4
learning_rate = 1e-3
patch_size = 8
train_data = "synthetic:count=4,size=8,seed=1"
test_data = "synthetic:count=2,size=16,seed=2"
dtype = "float32"
"""


@pytest.fixture(autouse=True)
def _quiet_logs():
    log.set_quiet(True)
    yield
    log.set_quiet(False)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def toy_unet():
    return DenoiserConfig("unet", image_channels=1, base_channels=4, depth=1)


@pytest.fixture
def toy_weights(toy_unet):
    return init_weights(toy_unet, seed=0, dtype=np.float64)


@pytest.fixture
def cs_op64():
    """8x8 block, 16 measurements, float64, fixed Phi."""
    return CsOperator.random(0.25, 8, seed=3, learnable=False, dtype=np.float64)


@pytest.fixture
def identity_cs():
    """Phi = I on 2x2 blocks (ratio 1)."""
    return CsOperator(np.eye(4), (2, 2), learnable=False, dtype=np.float64)


@pytest.fixture
def tiny_config(tmp_path):
    """Path to a self-contained toy CS config whose out_dir lives under tmp_path."""
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_CONFIG + f'out_dir = "{(tmp_path / "run").as_posix()}"\n', encoding="utf-8")
    return path
