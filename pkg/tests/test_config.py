import json

import pytest
from pydantic import ValidationError

from koopcon.config import RunConfig, load_config, parse_config
from koopcon.errors import ConfigError


def test_minimal_config_fills_defaults():
    cfg = parse_config({"dataset": "mnist"})
    assert cfg.alpha2 == 1.0 and cfg.img_per_class == 10 and cfg.depth == "shallow"
    assert cfg.condense_config().weights.alpha3 == 0.01


def test_negative_alpha_names_key():
    with pytest.raises(ConfigError) as info:
        parse_config({"alpha2": -1})
    assert info.value.key == "alpha2"


def test_unknown_key():
    with pytest.raises(ConfigError, match="unknown config key 'alhpa2'"):
        parse_config({"alhpa2": 1.0})


def test_wrong_type_rejected():
    with pytest.raises(ConfigError):
        parse_config({"epochs": "ten"})
    with pytest.raises(ConfigError):
        parse_config({"epochs": 2.5})
    with pytest.raises(ConfigError):
        parse_config([1, 2])


def test_whole_number_floats_accepted():
    assert parse_config({"alpha1": 1}).alpha1 == 1.0


def test_hash_ignores_key_order():
    a = parse_config({"seed": 3, "alpha1": 0.5, "depth": "deep"})
    b = parse_config({"depth": "deep", "alpha1": 0.5, "seed": 3})
    assert a.hash() == b.hash()
    assert a.hash() != parse_config({"seed": 4, "alpha1": 0.5, "depth": "deep"}).hash()


def test_load_config_errors(tmp_path):
    missing = tmp_path / "nope.json"
    with pytest.raises(ConfigError, match="nope.json"):
        load_config(missing)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"dataset": "toy", "epochs": 3}))
    assert load_config(good) == RunConfig(dataset="toy", epochs=3)


def test_frozen():
    cfg = parse_config({})
    with pytest.raises(ValidationError):
        cfg.seed = 5
