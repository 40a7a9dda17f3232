"""Data structures shared across the hfselect pipeline."""
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np


class Method(Enum):
    """Reconciliation methods. The integer code is the classifier label."""

    BU = 0
    TD = 1
    COM = 2

    @property
    def code(self) -> int:
        return self.value

    @classmethod
    def from_code(cls, code: int) -> "Method":
        return cls(int(code))

    @classmethod
    def parse(cls, text: str) -> "Method":
        """Accepts tags (BU/TD/COM) and CLI aliases (bu/td/mint)."""
        key = text.strip().lower()
        aliases = {"bu": cls.BU, "td": cls.TD, "com": cls.COM, "mint": cls.COM}
        if key not in aliases:
            raise ValueError(f"Unknown reconciliation method '{text}'. Choose from bu, td, mint.")
        return aliases[key]


# Label ties are resolved in this order.
TIE_PRIORITY: Tuple[Method, ...] = (Method.COM, Method.BU, Method.TD)

LABEL_ENCODING: Dict[str, int] = {m.name: m.code for m in Method}


class ModelKind(Enum):
    REG_AR = "reg_ar"
    AR = "ar"
    NAIVE = "naive"
    MEAN = "mean"


class ErrorCategory(Enum):
    """Categories of errors for better user understanding."""
    VALIDATION = "validation"
    CONFIG = "config"
    DATA = "data"
    DIMENSION = "dimension"
    NUMERICAL = "numerical"
    MODEL = "model"
    UNKNOWN = "unknown"


@dataclass
class ErrorInfo:
    """Structured error information with troubleshooting hints."""
    category: ErrorCategory
    message: str
    original_error: Optional[str] = None
    troubleshooting_hint: Optional[str] = None
    suggest_action: Optional[str] = None
    context: Dict[str, Any] = field(default_factory=dict)


@dataclass
class CoherenceReport:
    """Per-period coherence violations of an m x n matrix."""
    violation: np.ndarray
    tolerance: np.ndarray
    flagged_periods: List[int]

    @property
    def ok(self) -> bool:
        return not self.flagged_periods

    @property
    def max_violation(self) -> float:
        return float(self.violation.max()) if self.violation.size else 0.0


@dataclass(frozen=True)
class BaseModelSpec:
    kind: ModelKind = ModelKind.REG_AR
    ar_order: int = 2
    use_regressor: bool = True
    ridge: float = 0.0
    truncate_nonneg: bool = False

    @property
    def min_length(self) -> int:
        return max(8, 2 * self.ar_order + 2)


@dataclass
class FitResult:
    """Output of a single-series fit."""
    forecasts: np.ndarray
    residuals: np.ndarray
    coefficients: Dict[str, Any] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)


@dataclass
class BaseForecasts:
    """Base forecasts (m x h) and one-step in-sample residuals for every series."""
    forecasts: np.ndarray
    residuals: np.ndarray
    origin: int
    warnings: Dict[str, List[str]] = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.forecasts.shape[1]


@dataclass
class ShrinkageEstimate:
    W1: np.ndarray
    W1_diag: np.ndarray
    lam: float
    W_shrunk: np.ndarray
    floored: List[int] = field(default_factory=list)


@dataclass
class GMatrix:
    """Reconciliation mapping from m base forecasts to m_k bottom values."""
    method: Method
    G: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)


@dataclass
class FeatureVector:
    values: Dict[str, float]
    registry_tag: str
    nonfinite: List[str] = field(default_factory=list)

    def as_array(self, names: List[str]) -> np.ndarray:
        return np.array([self.values[n] for n in names], dtype=float)


@dataclass
class FeatureMatrix:
    level_means: np.ndarray  # k x z
    names: List[str]
    registry_tag: str
    hierarchy_id: str = ""
    origin: int = 0

    @property
    def row(self) -> np.ndarray:
        """Flattened level-major row of length k * z."""
        return self.level_means.reshape(-1)

    @property
    def column_names(self) -> List[str]:
        k = self.level_means.shape[0]
        return [f"L{level}:{name}" for level in range(k) for name in self.names]


@dataclass(frozen=True)
class GbtConfig:
    eta: float = 0.01
    max_depth: int = 5
    min_child_weight: float = 5.0
    subsample: float = 0.7
    colsample_bytree: float = 1.0
    n_rounds: int = 1000
    n_classes: int = 3
    lambda_reg: float = 1.0
    gamma: float = 0.0
    seed: int = 0
    early_stopping_rounds: Optional[int] = None


@dataclass
class EvalRecord:
    """One (hierarchy, origin, node, method) accuracy measurement."""
    hierarchy_id: str
    origin: int
    node_id: str
    level: int
    method: str
    mase: float
    rmsse: float
    h: int
    degenerate: bool = False


@dataclass
class McbResult:
    methods: List[str]
    mean_ranks: Dict[str, float]
    critical_difference: float
    intervals: Dict[str, Tuple[float, float]]
    best: str
    significantly_worse: Dict[str, bool]
    n_instances: int
    q_alpha: float
    alpha: float


@dataclass(frozen=True)
class SynthConfig:
    n_hierarchies: int = 55
    levels: Tuple[int, ...] = (1, 2, 12)
    n_periods: int = 120
    promo_prob: float = 0.1
    lift_range: Tuple[float, float] = (2.0, 5.0)
    price_base: float = 4.0
    discount_range: Tuple[float, float] = (0.15, 0.4)
    base_level_range: Tuple[float, float] = (50.0, 500.0)
    trend_range: Tuple[float, float] = (-0.002, 0.004)
    noise: float = 0.15
    cross_corr: float = 0.3
    seed: int = 7


@dataclass(frozen=True)
class ChfWindows:
    """Rolling-origin windows: off-line p..r, on-line test_from..test_to (last origin)."""
    p: int = 26
    r: int = 84
    h: int = 4
    test_from: int = 84
    test_to: int = 116
