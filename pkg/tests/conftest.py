# -*- coding: utf-8 -*-
import hypothesis
import numpy as np
import pytest

from app.core.config import ExperimentConfig
from app.domain.models import LayeredModel
from app.engine.lora import build_model
from app.harness.selftest import quick_config

np.seterr(all="warn")

hypothesis.settings.register_profile("default", max_examples=30, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    return quick_config(seed=0)


@pytest.fixture
def small_model() -> LayeredModel:
    """4 layers, width 4, trained-looking adapters (B != 0)."""
    model = build_model(4, 4, 3, 2, 2, seed=5)
    rng = np.random.default_rng(5)
    for layer in model.layers:
        layer.adapter.B = rng.normal(0.0, 0.3, size=layer.adapter.B.shape)
    return model


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch, tmp_path):
    # keep developer .env / DEVFT_* settings out of the tests
    for name in ("DEVFT_CONFIG", "DEVFT_SEED", "DEVFT_OUT", "DEVFT_WORKERS"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)
