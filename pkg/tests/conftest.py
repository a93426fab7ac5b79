import numpy as np
import pytest

from spikealign.config import Config
from spikealign.encoders import DualEncoder, vocab_from_store
from spikealign.synthetic import DESK_CONFIG, make_desk_data, write_desk_data


def small_config(**extra) -> Config:
    values = dict(DESK_CONFIG)
    values.update({"image.dim": 16, "model.out_dim": 8, "text.hidden": "16", "text.max_len": 6})
    values.update(extra)
    return Config(values)


def small_model(seed=0, **extra):
    data = make_desk_data(n_train=12, n_test=6, out_dim=8, seed=seed)
    tokens, vectors = vocab_from_store(data.words)
    return DualEncoder(small_config(seed=seed, **extra), tokens, vectors), data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_data():
    return make_desk_data()


@pytest.fixture(scope="session")
def desk_dir(tmp_path_factory, desk_data):
    out = tmp_path_factory.mktemp("desk")
    cfg = write_desk_data(out, desk_data)
    return cfg
