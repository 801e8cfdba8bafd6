import pytest
import os
import json
from src.config import Config
from src.utils import ConfigError

CONFIG_PATH = os.path.join(os.path.dirname(__file__), "..", "config.json")


@pytest.fixture
def config_data():
    with open(CONFIG_PATH, "r", encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture
def valid_config(tmp_path, config_data):
    config_file = tmp_path / "config.json"
    with open(config_file, "w", encoding="utf-8") as f:
        json.dump(config_data, f)
    return config_file


def test_load_valid_config(valid_config):
    config = Config()
    config.load(str(valid_config))
    assert config.get("seed") == 0
    assert config.section("detection").consecutive_steps == 72
    assert config.section("aignn").variants == ["chebnet", "aignn", "chebnet_in", "chebnet_emb"]


def test_shipped_configs_are_valid():
    config = Config()
    config.load(CONFIG_PATH)
    assert config.section("nar").hidden_dim == 64
    assert config.section("detection").target_fraction == pytest.approx(12 / 14)
    config.load(os.path.join(os.path.dirname(CONFIG_PATH), "config_backup.json"))
    assert config.section("simulation").leak_min_duration == 576


def test_load_invalid_config(tmp_path):
    invalid_config_file = tmp_path / "config.json"
    with open(invalid_config_file, "w", encoding="utf-8") as f:
        f.write("INVALID JSON")
    config = Config()
    with pytest.raises(SystemExit):  # Ověření ukončení programu
        config.load(str(invalid_config_file))


def test_load_missing_key(tmp_path, config_data):
    # Chybí sekce 'detection'
    del config_data["detection"]
    config_file = tmp_path / "config.json"
    with open(config_file, "w", encoding="utf-8") as f:
        json.dump(config_data, f)
    config = Config()
    with pytest.raises(SystemExit):
        config.load(str(config_file))


def test_backup_used_when_main_invalid(tmp_path, config_data):
    (tmp_path / "config.json").write_text("{", encoding="utf-8")
    config_data["seed"] = 42
    with open(tmp_path / "config_backup.json", "w", encoding="utf-8") as f:
        json.dump(config_data, f)
    config = Config()
    config.load(str(tmp_path / "config.json"))
    assert config.get("seed") == 42
    assert config.loaded_path.endswith("config_backup.json")


def test_validation_rejects_bad_values(tmp_path, config_data):
    config_data["aignn"]["variants"] = ["gcn"]
    config_file = tmp_path / "config.json"
    with open(config_file, "w", encoding="utf-8") as f:
        json.dump(config_data, f)
    with pytest.raises(SystemExit):
        Config().load(str(config_file))


def test_overrides(valid_config):
    config = Config()
    config.load(str(valid_config))
    config.override(seed=7, jobs=3, output_dir="runs/other")
    assert (config.get("seed"), config.get("jobs"), config.get("output_dir")) == (7, 3, "runs/other")
    assert config.resolved()["seed"] == 7
    with pytest.raises(ConfigError):
        config.override(jobs=0)


def test_singleton():
    assert Config() is Config()


def test_leaks_must_start_after_reference_span(tmp_path, config_data):
    # Únik by zasáhl referenční úsek pro mean/std
    config_data["simulation"]["leak_start_after"] = config_data["aignn"]["history"] + 10
    config_file = tmp_path / "config.json"
    with open(config_file, "w", encoding="utf-8") as f:
        json.dump(config_data, f)
    with pytest.raises(SystemExit):
        Config().load(str(config_file))


def test_leak_start_bound_ignored_without_reference_span(tmp_path, config_data):
    config_data["simulation"]["leak_start_after"] = 0
    config_data["detection"]["reference_steps"] = None
    config_file = tmp_path / "config.json"
    with open(config_file, "w", encoding="utf-8") as f:
        json.dump(config_data, f)
    config = Config()
    config.load(str(config_file))
    assert config.section("simulation").leak_start_after == 0
