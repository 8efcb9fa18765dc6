import json

import pytest

from dyckprobe import config


def test_profiles_exist_and_differ():
    desk, full = config.profile("desk"), config.profile("full")
    assert desk.count == 100_000 and full.count == 1_000_000
    assert full.repeats == 100 and desk.repeats == 10
    assert full.train.lr == 1e-3
    assert set(full.units) >= {2, 10, 20, 50}
    with pytest.raises(config.ConfigError):
        config.profile("huge")


def test_round_trip(tmp_path):
    cfg = config.profile("desk")
    config.dump(cfg, tmp_path / "c.json")
    back = config.load(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()


def test_overlay_keeps_unspecified_preset_values():
    cfg = config.from_dict({"schema_version": 1, "train": {"epochs": 2}, "units": [4, 8]})
    assert cfg.train.epochs == 2 and cfg.units == (4, 8)
    assert cfg.train.lr == config.desk_profile().train.lr
    assert cfg.grammar == config.desk_profile().grammar


@pytest.mark.parametrize("d", [
    {},
    {"schema_version": 2},
    {"schema_version": 1, "colour": "red"},
    {"schema_version": 1, "train": {"momentum": 0.9}},
    {"schema_version": 1, "grammar": {"n": 7}},
    {"schema_version": 1, "train": {"hidden_units": 0}},
    {"schema_version": 1, "profile": "huge"},
])
def test_rejects_invalid(d):
    with pytest.raises(config.ConfigError):
        config.from_dict(d)


def test_load_rejects_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(config.ConfigError):
        config.load(p)


def test_to_dict_is_json_serialisable():
    json.dumps(config.profile("full").to_dict())
