import numpy as np
import pytest

from ifprune.bundle import ModelBundle
from ifprune.model import ModelConfig
from ifprune.predictor import PredictorConfig

TINY = ModelConfig(n_layers=2, d_model=16, d_ffn=32, t_ffn=12, n_heads=2, vocab=64, max_seq=32)
TINY_PRED = PredictorConfig(n_layers=1, d_model=8, n_heads=2, d_ffn=16)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_bundle():
    return ModelBundle.create(TINY, "dynamic", seed=3, predictor_cfg=TINY_PRED)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize_head(owner, seed=0, std=1.0):
    """Spread predictor scores so masks differ across prompts (fresh heads are near-uniform)."""
    r = np.random.default_rng(seed)
    w = getattr(owner, "selector", owner).params["head.w2"]
    w.data[:] = r.normal(0, std, w.shape)
