"""
Pruebas del gestor de configuración.
"""

import json

import pytest

from src.config_manager import ConfigManager, get_config, load_flat_config
from src.errors import ConfigError


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({
        "sistema": {"nombre": "BNTK-prueba"},
        "oraculo": {"ancho": 128},
        "entrenamiento": {"lr": 0.5, "anchos_barrido": "2,8"},
        "datos": {"directorio": str(tmp_path / "datos"), "limite_train": 10},
        "verificacion": {"replicas_completas_jj": 500},
        "presets": {"rapido": {"lr": 1.0, "steps": 5}},
    }), encoding="utf-8")
    return path


class TestConfigManager:

    def test_project_config_loads(self):
        config = get_config()
        assert config is get_config()
        assert config.get_system_name() == "BNTK"
        assert config.get_oracle_width() == 10000
        assert "synthetic" in config.get_preset_names()
        assert config.get_full_scale_replicas() == {"JJ": 100000, "Jf": 30000, "ff": 30000}

    def test_values_and_defaults(self, config_file, tmp_path):
        config = ConfigManager(str(config_file))
        assert config.get_system_name() == "BNTK-prueba"
        assert config.get_system_version() == "1.0.0"
        assert config.get_oracle_width() == 128
        assert config.get_oracle_depth_g() == 1
        assert config.get_eps_clamp() == pytest.approx(1e-7)

        defaults = config.get_training_defaults()
        assert defaults["lr"] == 0.5
        assert defaults["batch"] == 20
        assert defaults["widths"] == "2,8"

        assert config.get_data_directory() == tmp_path / "datos"
        assert config.get_desk_limits() == {"train": 10, "test": 1000}
        assert config.get_full_scale_replicas()["JJ"] == 500

    def test_numeric_limits(self, config_file):
        config = ConfigManager(str(config_file))
        assert config.get_initial_jitter() == pytest.approx(1e-10)
        assert config.get_max_jitter_doublings() == 20
        assert config.get_max_jitter() == pytest.approx(1e-4)
        assert config.get_jackknife_blocks() == 10

        data = json.loads(config_file.read_text(encoding="utf-8"))
        data["oraculo"]["jitter_maximo"] = 0.5
        data["verificacion"]["bloques_jackknife"] = 4
        config_file.write_text(json.dumps(data), encoding="utf-8")
        config.reload()
        assert config.get_max_jitter() == 0.5
        assert config.get_jackknife_blocks() == 4

    def test_presets(self, config_file):
        config = ConfigManager(str(config_file))
        preset = config.get_preset("rapido")
        preset["lr"] = 99.0
        assert config.get_preset("rapido")["lr"] == 1.0
        with pytest.raises(ConfigError):
            config.get_preset("lento")

    def test_missing_and_malformed(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ConfigManager(str(tmp_path / "no.json"))
        broken = tmp_path / "roto.json"
        broken.write_text("{\"sistema\": ", encoding="utf-8")
        with pytest.raises(ConfigError):
            ConfigManager(str(broken))

    def test_reload(self, config_file):
        config = ConfigManager(str(config_file))
        data = json.loads(config_file.read_text(encoding="utf-8"))
        data["oraculo"]["ancho"] = 256
        config_file.write_text(json.dumps(data), encoding="utf-8")
        config.reload()
        assert config.get_oracle_width() == 256


class TestWorkerCount:

    def test_env_caps_threads(self, config_file, monkeypatch):
        config = ConfigManager(str(config_file))
        monkeypatch.setenv("BNTK_THREADS", "1")
        assert config.get_worker_count() == 1

    @pytest.mark.parametrize("raw", ["dos", "0", "-3"])
    def test_invalid_env(self, config_file, monkeypatch, raw):
        config = ConfigManager(str(config_file))
        monkeypatch.setenv("BNTK_THREADS", raw)
        with pytest.raises(ConfigError):
            config.get_worker_count()

    def test_without_env(self, config_file, monkeypatch):
        monkeypatch.delenv("BNTK_THREADS", raising=False)
        assert ConfigManager(str(config_file)).get_worker_count() >= 1


class TestFlatConfig:

    def test_parses_keys_and_comments(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comentario\n\n--eval-every = 10\nd = 10,100,inf\nlr=0.5\n",
                        encoding="utf-8")
        assert load_flat_config(str(path)) == {"eval_every": "10", "d": "10,100,inf", "lr": "0.5"}

    def test_errors(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_flat_config(str(tmp_path / "no.cfg"))
        path = tmp_path / "run.cfg"
        path.write_text("lr 0.5\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_flat_config(str(path))
        path.write_text(" = 3\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_flat_config(str(path))
