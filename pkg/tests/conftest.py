from __future__ import annotations

import numpy as np
import pytest
import torch

from gdmrg.config import RunConfig
from gdmrg.datagen import generate_splits


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_cfg(tmp_path) -> RunConfig:
    """Shapes small enough for a training run in a few seconds."""
    return RunConfig(
        data_dir=str(tmp_path / "data"),
        out_dir=str(tmp_path / "runs"),
        n_train=96,
        n_val=48,
        n_test=32,
        n_patches=4,
        feat_dim=8,
        patch_dim=8,
        d_x=8,
        se_reduction=2,
        d_e=6,
        d_g=8,
        dgsa_heads=2,
        d_m=16,
        dec_heads=2,
        dec_layers=1,
        max_len=48,
        batch_size=16,
        stage1_epochs=1,
        stage2_epochs=1,
        curriculum_steps=4,
        beam_width=2,
    ).validate()


@pytest.fixture
def tiny_splits(tiny_cfg):
    sizes = {"train": tiny_cfg.n_train, "val": tiny_cfg.n_val, "test": tiny_cfg.n_test}
    splits, _ = generate_splits(tiny_cfg.gen_config(), sizes, tiny_cfg.seed, tiny_cfg.data_dir, probe=False)
    return splits
