"""Configuration validation for pipeline runs."""
from dataclasses import asdict
from typing import Any, Dict, Optional, Tuple

from .datastructures import BaseModelSpec, ChfWindows, GbtConfig, SynthConfig

# field -> (low, high, low_inclusive, high_inclusive); None means unbounded
Rule = Tuple[Optional[float], Optional[float], bool, bool]


class ConfigValidator:
    """Validates configuration sections before any work starts."""

    METRICS = ("mase", "rmsse")

    GBT_RULES: Dict[str, Rule] = {
        "eta": (0.0, 1.0, False, True),
        "subsample": (0.0, 1.0, False, True),
        "colsample_bytree": (0.0, 1.0, False, True),
        "max_depth": (0, None, True, False),
        "min_child_weight": (0.0, None, True, False),
        "n_rounds": (0, None, True, False),
        "n_classes": (2, None, True, False),
        "lambda_reg": (0.0, None, True, False),
        "gamma": (0.0, None, True, False),
    }

    SYNTH_RULES: Dict[str, Rule] = {
        "n_hierarchies": (1, None, True, False),
        "n_periods": (2, None, True, False),
        "promo_prob": (0.0, 1.0, True, True),
        "price_base": (0.0, None, False, False),
        "noise": (0.0, None, True, False),
        "cross_corr": (0.0, 1.0, True, True),
    }

    # (low, high) pairs that must be ordered and respect a lower bound
    SYNTH_RANGES: Dict[str, float] = {
        "lift_range": 0.0,
        "discount_range": 0.0,
        "base_level_range": 0.0,
        "trend_range": float("-inf"),
    }

    MODEL_RULES: Dict[str, Rule] = {
        "ar_order": (0, None, True, False),
        "ridge": (0.0, None, True, False),
    }

    @classmethod
    def _check_rules(cls, section: str, values: Dict[str, Any],
                     rules: Dict[str, Rule]) -> Tuple[bool, Optional[str]]:
        for name, (low, high, low_inc, high_inc) in rules.items():
            value = values.get(name)
            if value is None:
                continue
            if low is not None and (value < low or (value == low and not low_inc)):
                return False, f"{section}.{name} must be {'>=' if low_inc else '>'} {low} (got {value})"
            if high is not None and (value > high or (value == high and not high_inc)):
                return False, f"{section}.{name} must be {'<=' if high_inc else '<'} {high} (got {value})"
        return True, None

    @classmethod
    def validate_gbt(cls, cfg: GbtConfig) -> Tuple[bool, Optional[str]]:
        ok, message = cls._check_rules("gbt", asdict(cfg), cls.GBT_RULES)
        if not ok:
            return ok, message
        if cfg.early_stopping_rounds is not None and cfg.early_stopping_rounds < 1:
            return False, f"gbt.early_stopping_rounds must be >= 1 (got {cfg.early_stopping_rounds})"
        return True, None

    @classmethod
    def validate_synth(cls, cfg: SynthConfig) -> Tuple[bool, Optional[str]]:
        ok, message = cls._check_rules("synth", asdict(cfg), cls.SYNTH_RULES)
        if not ok:
            return ok, message
        for name, floor in cls.SYNTH_RANGES.items():
            pair = getattr(cfg, name)
            if len(pair) != 2 or pair[0] > pair[1]:
                return False, f"synth.{name} must be an ordered (low, high) pair (got {pair})"
            if pair[0] < floor:
                return False, f"synth.{name} must not go below {floor} (got {pair})"
        if cfg.discount_range[1] >= 1.0:
            return False, f"synth.discount_range must stay below 1 (got {cfg.discount_range})"
        levels = list(cfg.levels)
        if not levels or levels[0] != 1 or any(b <= a or b % a for a, b in zip(levels, levels[1:])):
            return False, f"synth.levels must start at 1 and grow with equal fan-out (got {levels})"
        return True, None

    @classmethod
    def validate_model(cls, spec: BaseModelSpec) -> Tuple[bool, Optional[str]]:
        return cls._check_rules("model", asdict(spec), cls.MODEL_RULES)

    @classmethod
    def validate_windows(cls, windows: ChfWindows, n: Optional[int] = None) -> Tuple[bool, Optional[str]]:
        """Check the off-line/on-line windows, against the data length n when known."""
        if windows.h < 1:
            return False, f"windows.h must be >= 1 (got {windows.h})"
        if windows.p + windows.h > windows.r:
            return False, f"windows.p + h must not exceed windows.r (p={windows.p}, h={windows.h}, r={windows.r})"
        if windows.test_from < windows.r:
            return False, f"windows.test_from must be >= windows.r (got {windows.test_from} < {windows.r})"
        if windows.test_to < windows.test_from:
            return False, f"windows.test_to must be >= windows.test_from (got {windows.test_to})"
        if n is not None and windows.test_to + windows.h > n:
            return False, f"windows.test_to + h = {windows.test_to + windows.h} exceeds the data length {n}"
        return True, None

    @classmethod
    def validate_metric(cls, metric: str) -> Tuple[bool, Optional[str]]:
        if metric not in cls.METRICS:
            return False, f"metric must be one of {', '.join(cls.METRICS)} (got {metric!r})"
        return True, None

    @classmethod
    def validate_alpha(cls, alpha: float) -> Tuple[bool, Optional[str]]:
        if not 0.0 < alpha < 1.0:
            return False, f"alpha must be in (0, 1) (got {alpha})"
        return True, None
