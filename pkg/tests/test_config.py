import json

import pytest

from hinflow.config import FileConfig, config_from_dict, config_to_dict, load_config, save_config
from hinflow.errors import ConfigError


def test_roundtrip_identity(tmp_path):
    cfg = FileConfig()
    cfg.run.seed = 17
    cfg.run.planner.train_steps = 123
    path = tmp_path / "c.json"
    save_config(path, cfg)
    loaded = load_config(path)
    assert config_to_dict(loaded) == config_to_dict(cfg)
    save_config(tmp_path / "c2.json", loaded)
    assert (tmp_path / "c2.json").read_text() == path.read_text()


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as err:
        config_from_dict({"run": {"no_such_knob": 1}})
    assert "no_such_knob" in str(err.value)
    with pytest.raises(ConfigError):
        config_from_dict({"walrus": True})


def test_type_checking():
    with pytest.raises(ConfigError):
        config_from_dict({"run": {"seed": "zero"}})
    with pytest.raises(ConfigError):
        config_from_dict({"run": {"n_videos": 1.5}})
    with pytest.raises(ConfigError):
        config_from_dict({"run": {"grid_points": "yes"}})
    cfg = config_from_dict({"run": {"video_jitter": 0, "horizon": 40}})
    assert cfg.run.video_jitter == 0.0
    assert cfg.run.horizon == 40


def test_overrides_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"run": {"seed": 5, "n_videos": 7}}))
    cfg = load_config(path, {"run.seed": 9})
    assert cfg.run.seed == 9      # flag beats file
    assert cfg.run.n_videos == 7  # file beats default
    assert cfg.run.n_demos == 1   # default


def test_validation_runs_on_load(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"run": {"online": {"budget": 100}, "eval": {"cadence": 33}}}))
    with pytest.raises(ConfigError):
        load_config(path)
