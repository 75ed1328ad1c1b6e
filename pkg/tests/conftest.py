import os

import hypothesis
import numpy as np
import pytest
import torch

from icpolypseg.config import (
    TrainConfig, ModelConfig, EncoderSpec, CFCConfig, SynthConfig, LossConfig,
)
from icpolypseg.data import synth_generate, load_dataset

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture
def double_precision():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture(autouse=True)
def _isolated_runs_db(tmp_path, monkeypatch):
    monkeypatch.setenv("ICPOLYP_RUNS_DB", str(tmp_path / "runs.db"))
    monkeypatch.delenv("ICPOLYP_DATA_ROOT", raising=False)


def tiny_model_config(**overrides) -> ModelConfig:
    cfg = ModelConfig(
        encoder=EncoderSpec(stage_channels=[4, 6, 8, 8, 8]),
        decoder_width=4,
        input_size=32,
        pfr_scale_mode="inv_chw",
        cpfr_scale_mode="inv_chw",
        cfc=CFCConfig(scale_mode="inv_chw"),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def tiny_train_config(**overrides) -> TrainConfig:
    cfg = TrainConfig.desk()
    cfg.model = ModelConfig(
        encoder=EncoderSpec(stage_channels=[8, 8, 16, 16, 16]),
        decoder_width=8,
        input_size=64,
        pfr_scale_mode="inv_chw",
        cpfr_scale_mode="inv_chw",
        cfc=CFCConfig(scale_mode="inv_chw"),
    )
    cfg.loss = LossConfig(weight_kernel=7)
    cfg.max_epochs = 2
    cfg.early_stop_patience = 1
    cfg.batch_size = 2
    cfg.deterministic = True
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


@pytest.fixture
def tiny_model_cfg() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """8 train + 4 val synthetic pairs at 64 px."""
    root = tmp_path_factory.mktemp("synth")
    synth_generate(SynthConfig(count=8, canvas=64, seed=3), str(root / "train"))
    synth_generate(SynthConfig(count=4, canvas=64, seed=4), str(root / "val"))
    return str(root)


@pytest.fixture
def synth_sets(synth_root):
    return load_dataset(synth_root, "train", 64), load_dataset(synth_root, "val", 64)
