import pytest

from authsim.config import load_scenarios, load_settings


class TestLoadSettings:
    def test_default_files_load(self, monkeypatch):
        monkeypatch.delenv("AUTHSIM_SEED", raising=False)
        settings = load_settings()
        assert settings["simulation"]["seed"] == 20190601
        assert settings["calibration"]["mode"] == "auto"

    def test_environment_overrides_default(self, tmp_path, monkeypatch):
        path = tmp_path / "settings.yaml"
        path.write_text('simulation:\n  seed: "${AUTHSIM_SEED:-1}"\n  tags: ["run-${AUTHSIM_TAG}"]\n')
        monkeypatch.setenv("AUTHSIM_SEED", "77")
        monkeypatch.setenv("AUTHSIM_TAG", "nightly")
        settings = load_settings(path)
        assert settings["simulation"] == {"seed": 77, "tags": ["run-nightly"]}

    def test_empty_variable_falls_back_to_default(self, tmp_path, monkeypatch):
        path = tmp_path / "settings.yaml"
        path.write_text('logging:\n  dir: "${AUTHSIM_LOG_DIR:-logs}"\n  level: "${AUTHSIM_LOG_LEVEL:-INFO}"\n')
        monkeypatch.setenv("AUTHSIM_LOG_DIR", "")
        monkeypatch.delenv("AUTHSIM_LOG_LEVEL", raising=False)
        assert load_settings(path)["logging"] == {"dir": "logs", "level": "INFO"}

    def test_missing_variable_without_default(self, tmp_path, monkeypatch):
        path = tmp_path / "settings.yaml"
        path.write_text('report:\n  out: "${AUTHSIM_REPORT_OUT}"\n')
        monkeypatch.delenv("AUTHSIM_REPORT_OUT", raising=False)
        with pytest.raises(ValueError, match="AUTHSIM_REPORT_OUT"):
            load_settings(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "settings.yaml"
        path.write_text("")
        assert load_settings(path) == {}


class TestLoadScenarios:
    def test_registry_families(self):
        families = load_scenarios()
        assert {"fig2", "table1", "table2", "table3"} <= set(families)
        assert families["fig2"]["params"]["rho_ae"] == 0.1

    def test_entry_without_params(self, tmp_path):
        path = tmp_path / "scenarios.yaml"
        path.write_text("scenarios:\n  broken:\n    detectors: [llr]\n")
        with pytest.raises(ValueError, match="broken"):
            load_scenarios(path)
