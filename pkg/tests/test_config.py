import json

import pytest

from fibinetpp.config import RunConfig
from fibinetpp.errors import ConfigError


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.learning_rates() == (1e-4, 1e-3)
    assert cfg.hyper().mlp == (400, 400, 400)


def test_file_round_trip(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(RunConfig(d=8, g=4, lr=0.01).to_dict()))
    cfg = RunConfig.from_file(path)
    assert cfg == RunConfig(d=8, g=4, lr=0.01)
    assert cfg.learning_rates() == (0.01,)


def test_override_skips_none():
    cfg = RunConfig(d=8).override(d=None, m=7)
    assert (cfg.d, cfg.m) == (8, 7)


@pytest.mark.parametrize("bad", [{"arch": "deepfm"}, {"d": 10, "g": 3}, {"lr": -1.0},
                                 {"lr_grid": []}, {"epochs": 0}, {"batch_size": 2.5},
                                 {"max_bad_fraction": 2.0}, {"num_numerical": -1},
                                 {"mlp": []}, {"field_type": "x"}])
def test_invalid(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad).validate()


def test_unknown_key():
    with pytest.raises(ConfigError, match="'lr_rate'"):
        RunConfig.from_dict({"lr_rate": 1.0})


def test_unreadable_and_invalid_json(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_file(tmp_path / "missing.json")
    (tmp_path / "x.json").write_text("[1, 2")
    with pytest.raises(ConfigError, match="not valid JSON"):
        RunConfig.from_file(tmp_path / "x.json")
    (tmp_path / "y.json").write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        RunConfig.from_file(tmp_path / "y.json")
