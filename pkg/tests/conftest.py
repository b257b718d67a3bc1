# tests/conftest.py
import numpy as np
import pytest

from mlaforge.attention import AttentionWeights
from mlaforge.tensorio import ModelConfig, init_toy, synth_corpus

TOY = {"d": 64, "n_h": 4, "n_g": 4, "d_h": 16, "n_layers": 2, "vocab": 256}


def make_config(**overrides) -> ModelConfig:
    data = dict(TOY)
    data.update(overrides)
    return ModelConfig.from_dict(data)


def random_tokens(cfg: ModelConfig, length: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, cfg.vocab, size=length)


@pytest.fixture(autouse=True)
def single_thread(monkeypatch):
    monkeypatch.setenv("MLAFORGE_THREADS", "1")


@pytest.fixture
def mha_config():
    return make_config()


@pytest.fixture
def gqa_config():
    return make_config(n_g=2)


@pytest.fixture
def mha_store(mha_config):
    return init_toy(mha_config, seed=0)


@pytest.fixture
def gqa_store(gqa_config):
    return init_toy(gqa_config, seed=0)


@pytest.fixture
def mha_weights(mha_config, mha_store):
    return AttentionWeights.from_store(mha_config, mha_store)


@pytest.fixture
def corpus(mha_config):
    return synth_corpus(mha_config.vocab, 4, 16, seed=7)
