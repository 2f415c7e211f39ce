import pytest

from nested_kv.config import ConfigError, load_config, parse_config
from nested_kv.model import ModelConfig


def test_parse_sections():
    text = """
    # toy model
    n_layers = 1
    head_dim = 8   # trailing comment
    tie_embeddings = true
    rope_base = 500.0
    pretrain_steps = 10
    learning_rate = 0.01
    schedule = quarters
    train_fraction = 0.8
    """
    s = parse_config(text)
    assert s["model"] == {"n_layers": 1, "head_dim": 8, "tie_embeddings": True, "rope_base": 500.0}
    assert s["pretrain"] == {"steps": 10}
    assert s["train"] == {"learning_rate": 0.01, "schedule": "quarters"}
    assert s["corpus"] == {"train_fraction": 0.8}
    assert ModelConfig(**s["model"]).head_dim == 8


def test_empty_config_gives_defaults():
    assert parse_config("") == {"model": {}, "pretrain": {}, "train": {}, "corpus": {}}
    assert load_config(None)["model"] == {}


@pytest.mark.parametrize("text", ["bogus = 1", "n_layers", "n_layers = two", "tie_embeddings = maybe"])
def test_bad_lines(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.cfg")
