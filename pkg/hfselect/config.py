"""Run configuration: JSON file, flag overrides and environment defaults.

Layout of the run-config JSON (every section and field optional)::

    {
      "model":   {"kind": "reg_ar", "ar_order": 2, "use_regressor": true, "ridge": 0.0, "truncate_nonneg": false},
      "windows": {"p": 26, "r": 84, "h": 4, "test_from": 84, "test_to": 116},
      "gbt":     {"eta": 0.01, "max_depth": 5, ...},
      "synth":   {"n_hierarchies": 55, "levels": [1, 2, 12], ...},
      "seasonal_period": 1, "level_weights": null, "metric": "mase", "alpha": 0.05,
      "retrain": true, "jobs": 4
    }
"""
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from .datastructures import BaseModelSpec, ChfWindows, GbtConfig, ModelKind, SynthConfig
from .error_handler import ConfigError
from .validation import ConfigValidator

SECTIONS = {
    "model": BaseModelSpec,
    "windows": ChfWindows,
    "gbt": GbtConfig,
    "synth": SynthConfig,
}
SCALARS = ("seasonal_period", "level_weights", "metric", "alpha", "retrain", "jobs")


def default_jobs() -> int:
    """HFSELECT_JOBS, else the number of CPUs."""
    env = os.getenv("HFSELECT_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"HFSELECT_JOBS must be an integer (got {env!r})", field="jobs")
    return os.cpu_count() or 1


@dataclass
class RunConfig:
    model: BaseModelSpec = field(default_factory=BaseModelSpec)
    windows: ChfWindows = field(default_factory=ChfWindows)
    gbt: GbtConfig = field(default_factory=GbtConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seasonal_period: int = 1
    level_weights: Optional[Tuple[float, ...]] = None
    metric: str = "mase"
    alpha: float = 0.05
    retrain: bool = True
    jobs: int = field(default_factory=default_jobs)

    def to_dict(self) -> Dict[str, Any]:
        """Serializable form; jobs is left out since it never changes results."""
        out = asdict(self)
        out["model"]["kind"] = self.model.kind.value
        out.pop("jobs")
        return out

    def validate(self) -> "RunConfig":
        checks = [
            ConfigValidator.validate_model(self.model),
            ConfigValidator.validate_windows(self.windows),
            ConfigValidator.validate_gbt(self.gbt),
            ConfigValidator.validate_synth(self.synth),
            ConfigValidator.validate_metric(self.metric),
            ConfigValidator.validate_alpha(self.alpha),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message, field=message.split(" ", 1)[0])
        if self.seasonal_period < 1:
            raise ConfigError(f"seasonal_period must be >= 1 (got {self.seasonal_period})", field="seasonal_period")
        if self.level_weights is not None and any(w < 0 for w in self.level_weights):
            raise ConfigError("level_weights must be non-negative", field="level_weights")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1 (got {self.jobs})", field="jobs")
        return self


def _coerce(cls, name: str, value: Any) -> Any:
    if cls is BaseModelSpec and name == "kind":
        try:
            return ModelKind(value)
        except ValueError:
            choices = ", ".join(k.value for k in ModelKind)
            raise ConfigError(f"model.kind must be one of {choices} (got {value!r})", field="model.kind")
    if isinstance(value, list):
        return tuple(value)
    return value


def _build_section(section: str, raw: Any):
    cls = SECTIONS[section]
    if not isinstance(raw, dict):
        raise ConfigError(f"Section '{section}' must be an object", field=section)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"Unknown field(s) {unknown} in section '{section}'", field=f"{section}.{unknown[0]}")
    try:
        return cls(**{k: _coerce(cls, k, v) for k, v in raw.items()})
    except TypeError as exc:
        raise ConfigError(f"Invalid section '{section}': {exc}", field=section)


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Apply dotted overrides such as {"model.truncate_nonneg": True, "alpha": 0.1}."""
    for key, value in overrides.items():
        if value is None:
            continue
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTIONS or name not in {f.name for f in fields(SECTIONS[section])}:
                raise ConfigError(f"Unknown config field '{key}'", field=key)
            current = getattr(config, section)
            config = replace(config, **{section: replace(current, **{name: _coerce(SECTIONS[section], name, value)})})
        elif key in SCALARS:
            config = replace(config, **{key: tuple(value) if isinstance(value, list) else value})
        else:
            raise ConfigError(f"Unknown config field '{key}'", field=key)
    return config


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read a run-config JSON (optional), apply overrides and validate.

    Raises:
        ConfigError: naming the offending field path.
    """
    config = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}", field="--config")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Config file is not valid JSON: {exc}", field="--config")
        if not isinstance(raw, dict):
            raise ConfigError("Config file must hold a JSON object", field="--config")
        unknown = sorted(set(raw) - set(SECTIONS) - set(SCALARS))
        if unknown:
            raise ConfigError(f"Unknown top-level field(s) {unknown}", field=unknown[0])
        sections = {name: _build_section(name, raw[name]) for name in SECTIONS if name in raw}
        scalars = {name: raw[name] for name in SCALARS if name in raw}
        if isinstance(scalars.get("level_weights"), list):
            scalars["level_weights"] = tuple(scalars["level_weights"])
        config = replace(config, **sections, **scalars)
    if overrides:
        config = apply_overrides(config, overrides)
    return config.validate()
