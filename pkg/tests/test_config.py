import pytest

from spikealign.config import DEFAULTS, Config, config_from_text, load_config, parse_override
from spikealign.errors import ConfigError


def test_defaults():
    cfg = Config()
    assert cfg["time_steps"] == 4 and cfg["lif.beta"] == 0.9 and cfg["optim.name"] == "sgd"
    assert set(cfg) == set(DEFAULTS)


def test_unknown_key():
    with pytest.raises(ConfigError, match="unknown config key"):
        Config({"lif.bta": 0.5})


@pytest.mark.parametrize("key,raw,value", [("time_steps", "8", 8), ("lif.beta", "0.5", 0.5),
                                           ("text.train_embeddings", "off", False), ("eval.prompt", "x {}", "x {}")])
def test_typed_parse(key, raw, value):
    cfg = Config()
    cfg.set(key, raw)
    assert cfg[key] == value and type(cfg[key]) is type(value)


@pytest.mark.parametrize("key,raw", [("time_steps", "four"), ("lif.beta", "x"), ("text.train_embeddings", "maybe")])
def test_bad_values(key, raw):
    with pytest.raises(ConfigError):
        Config().set(key, raw)


def test_python_values_coerced():
    cfg = Config({"lif.beta": 1, "time_steps": 2})
    assert cfg["lif.beta"] == 1.0 and isinstance(cfg["lif.beta"], float)
    with pytest.raises(ConfigError):
        Config({"time_steps": 2.5})


def test_lists():
    cfg = Config({"robustness.expand": "1, 2,4", "robustness.replace": "0,12.5"})
    assert cfg.ints("robustness.expand") == [1, 2, 4]
    assert cfg.floats("robustness.replace") == [0.0, 12.5]
    cfg.set("robustness.expand", "1,x")
    with pytest.raises(ConfigError):
        cfg.ints("robustness.expand")


def test_file_and_overrides(tmp_path):
    (tmp_path / "run.cfg").write_text("# comment\nseed = 3\ndata.train = train.tsv\n\ntime_steps=6\n")
    cfg = load_config(tmp_path / "run.cfg", ["seed=9"])
    assert cfg["seed"] == 9 and cfg["time_steps"] == 6
    assert cfg.path("data.train") == tmp_path / "train.tsv"


def test_file_errors(tmp_path):
    (tmp_path / "bad.cfg").write_text("seed 3\n")
    with pytest.raises(ConfigError, match=":1:"):
        load_config(tmp_path / "bad.cfg")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError):
        parse_override("seed")


def test_required_path():
    with pytest.raises(ConfigError):
        Config().path("data.train")
    assert Config().path("data.train", required=False) is None


def test_snapshot_round_trip():
    cfg = Config({"lif.beta": 0.8, "text.train_embeddings": False, "pretrain.lr0": 1e-3})
    cfg.set("_vocab", "a b", allow_internal=True)
    back = config_from_text(cfg.to_text())
    assert dict(back) == dict(cfg) and back.internal == {"_vocab": "a b"}
    with pytest.raises(ConfigError):
        Config().set("_vocab", "x")
