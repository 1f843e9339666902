import json

import pytest

from stldm.config import (SEVIR_THRESHOLDS, THRESHOLD_PRESETS, Config, ConfigError, dump_config,
                          from_dict, load_config, full_scale_config, to_dict)


def test_defaults():
    cfg = Config()
    assert cfg.train.strategy == "C" and cfg.train.total_steps == 5000 and cfg.train.batch_size == 4
    assert cfg.eval.members == 10 and cfg.eval.ddim_steps == 20 and cfg.cfg.guidance_strength == 1.0
    assert cfg.data.synth.data_range == 255.0


def test_presets():
    assert THRESHOLD_PRESETS["sevir"] == SEVIR_THRESHOLDS == (16.0, 74.0, 133.0, 160.0, 181.0, 219.0)


def test_full_scale_config():
    p = full_scale_config()
    assert (p.train.total_steps, p.train.warmup_steps, p.train.peak_lr) == (200_000, 2000, 1e-4)
    assert (p.dims.H, p.dims.M, p.dims.N) == (128, 13, 12)


def test_round_trip(tmp_path):
    cfg = Config().replace(train={"seed": 7}, eval={"thresholds": [1, 2]})
    dump_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    assert load_config(None) == Config()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        from_dict({"train": {"sed": 1}})
    with pytest.raises(ConfigError):
        from_dict({"trian": {}})
    with pytest.raises(ConfigError):
        from_dict({"data": {"synth": {"hieght": 3}}})


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        from_dict({"train": {"strategy": "D"}})
    with pytest.raises(ConfigError):
        from_dict({"dims": {"H": 16}})          # disagrees with the data frame size


def test_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


def test_env_seed_override(monkeypatch):
    monkeypatch.setenv("STLDM_SEED", "42")
    assert from_dict({}).train.seed == 42
    monkeypatch.setenv("STLDM_SEED", "x")
    with pytest.raises(ConfigError):
        from_dict({})


def test_to_dict_is_json():
    json.dumps(to_dict(Config()))
