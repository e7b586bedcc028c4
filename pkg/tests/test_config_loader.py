import pytest

from gradsurgery.config_loader import apply_env_overrides, default_config, find_config_path, load_config
from gradsurgery.errors import ConfigError


def test_defaults_without_a_file(tmp_path):
    cfg = load_config(tmp_path, environ={})
    assert cfg == default_config()
    assert find_config_path(tmp_path) is None


def test_file_is_deep_merged(tmp_path):
    (tmp_path / "config.yaml").write_text("runner:\n  workers: 3\n")
    cfg = load_config(tmp_path, environ={})
    assert cfg["runner"]["workers"] == 3
    assert cfg["runner"]["keep_every"] == 10
    assert cfg["_config_path"].endswith("config.yaml")


def test_checkout_override_wins(tmp_path):
    (tmp_path / "config.yaml").write_text("runner: {workers: 3}\n")
    (tmp_path / ".gradsurgery").mkdir()
    (tmp_path / ".gradsurgery" / "config.yaml").write_text("runner: {workers: 5}\n")
    assert load_config(tmp_path, environ={})["runner"]["workers"] == 5


def test_environment_overrides_file(tmp_path):
    (tmp_path / "config.yaml").write_text("output: {dir: from_file}\n")
    cfg = load_config(tmp_path, environ={"GRADSURGERY_OUT_DIR": "from_env", "GRADSURGERY_WORKERS": "4"})
    assert cfg["output"]["dir"] == "from_env"
    assert cfg["runner"]["workers"] == 4


def test_empty_environment_value_is_ignored():
    cfg = apply_env_overrides(default_config(), {"GRADSURGERY_LOG_LEVEL": ""})
    assert cfg["logging"]["level"] == "INFO"


def test_bad_environment_value():
    with pytest.raises(ConfigError):
        apply_env_overrides(default_config(), {"GRADSURGERY_WORKERS": "many"})


@pytest.mark.parametrize("text", ["- a\n- b\n", "runner: {workers: 0}\n"])
def test_invalid_files(tmp_path, text):
    (tmp_path / "config.yaml").write_text(text)
    with pytest.raises(ConfigError):
        load_config(tmp_path, environ={})
