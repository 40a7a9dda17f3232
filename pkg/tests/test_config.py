"""Tests for run configuration loading and validation."""

import json

import pytest

from hfselect.config import RunConfig, apply_overrides, default_jobs, load_config
from hfselect.datastructures import ChfWindows, GbtConfig, ModelKind, SynthConfig
from hfselect.error_handler import ConfigError
from hfselect.validation import ConfigValidator


def _write(tmp_path, payload):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload))
    return path


class TestLoadConfig:
    def test_defaults(self):
        config = load_config()
        assert config.windows == ChfWindows(p=26, r=84, h=4, test_from=84, test_to=116)
        assert config.gbt.eta == 0.01
        assert config.gbt.n_rounds == 1000
        assert config.synth.levels == (1, 2, 12)
        assert config.metric == "mase"

    def test_file_sections(self, tmp_path):
        path = _write(tmp_path, {
            "model": {"kind": "ar", "ar_order": 3},
            "windows": {"p": 20, "r": 44, "h": 4, "test_from": 44, "test_to": 56},
            "synth": {"levels": [1, 2, 4], "n_periods": 64},
            "level_weights": [1, 1, 2],
            "alpha": 0.1,
        })
        config = load_config(path)
        assert config.model.kind == ModelKind.AR
        assert config.model.ar_order == 3
        assert config.windows.test_to == 56
        assert config.synth.levels == (1, 2, 4)
        assert config.level_weights == (1, 1, 2)
        assert config.alpha == 0.1

    def test_overrides_win_over_file(self, tmp_path):
        path = _write(tmp_path, {"synth": {"seed": 3}, "metric": "mase"})
        config = load_config(path, {"synth.seed": 9, "metric": "rmsse", "model.truncate_nonneg": True,
                                    "jobs": None})
        assert config.synth.seed == 9
        assert config.metric == "rmsse"
        assert config.model.truncate_nonneg

    @pytest.mark.parametrize("payload, field", [
        ({"gbt": {"eta": 0.0}}, "gbt.eta"),
        ({"gbt": {"subsample": 1.5}}, "gbt.subsample"),
        ({"gbt": {"learning_rate": 0.1}}, "gbt.learning_rate"),
        ({"windows": {"p": 82, "r": 84}}, "windows.p"),
        ({"windows": {"test_from": 60}}, "windows.test_from"),
        ({"model": {"kind": "arima"}}, "model.kind"),
        ({"synth": {"levels": [1, 3, 4]}}, "synth.levels"),
        ({"metric": "smape"}, "metric"),
        ({"alpha": 1.5}, "alpha"),
        ({"seasonal_period": 0}, "seasonal_period"),
        ({"color": "blue"}, "color"),
    ])
    def test_invalid_fields_are_named(self, tmp_path, payload, field):
        with pytest.raises(ConfigError) as excinfo:
            load_config(_write(tmp_path, payload))
        assert excinfo.value.context["field"] == field

    def test_missing_or_broken_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(bad)

    def test_unknown_override(self):
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), {"gbt.depth": 3})
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), {"verbose": True})

    def test_to_dict_leaves_out_jobs(self):
        out = RunConfig(jobs=3).to_dict()
        assert "jobs" not in out
        assert out["model"]["kind"] == "reg_ar"


class TestJobs:
    def test_environment(self, monkeypatch):
        monkeypatch.setenv("HFSELECT_JOBS", "3")
        assert default_jobs() == 3
        assert RunConfig().jobs == 3

    def test_bad_environment(self, monkeypatch):
        monkeypatch.setenv("HFSELECT_JOBS", "many")
        with pytest.raises(ConfigError):
            default_jobs()

    def test_defaults_to_cpu_count(self, monkeypatch):
        monkeypatch.delenv("HFSELECT_JOBS", raising=False)
        assert default_jobs() >= 1


class TestConfigValidator:
    def test_defaults_pass(self):
        assert ConfigValidator.validate_gbt(GbtConfig()) == (True, None)
        assert ConfigValidator.validate_synth(SynthConfig()) == (True, None)
        assert ConfigValidator.validate_windows(ChfWindows()) == (True, None)

    def test_windows_against_data_length(self):
        ok, message = ConfigValidator.validate_windows(ChfWindows(), n=100)
        assert not ok
        assert "exceeds the data length 100" in message
        assert ConfigValidator.validate_windows(ChfWindows(), n=120) == (True, None)

    def test_synth_ranges(self):
        ok, message = ConfigValidator.validate_synth(SynthConfig(lift_range=(5.0, 2.0)))
        assert not ok and message.startswith("synth.lift_range")
        ok, message = ConfigValidator.validate_synth(SynthConfig(discount_range=(0.2, 1.0)))
        assert not ok and "below 1" in message

    def test_early_stopping_rounds(self):
        ok, message = ConfigValidator.validate_gbt(GbtConfig(early_stopping_rounds=0))
        assert not ok and message.startswith("gbt.early_stopping_rounds")
