"""Run diagnostics: tallies of warning flags raised during a pipeline run."""
import threading
from collections import Counter
from typing import Any, Dict, Iterable, List, Optional

from .logging_manager import get_logger

# Flags raised across the package
RIDGE_FALLBACK = "ridge_fallback"
TD_UNIFORM_FALLBACK = "td_uniform_fallback"
MINT_JITTER = "mint_jitter"
MINT_PINV = "mint_pinv"
MINT_VARIANCE_FLOOR = "mint_variance_floor"
NONFINITE_FEATURE = "nonfinite_feature"
LABEL_TIE = "label_tie"
DEGENERATE_METRIC = "degenerate_metric"
ZERO_PREDICTION_CLASS = "zero_prediction_class"
ZERO_BENCHMARK = "zero_benchmark"
SKIPPED_HIERARCHY = "skipped_hierarchy"
CONSTANT_SELECTOR = "constant_selector"


class RunDiagnostics:
    """Thread-safe counters for warning flags, with optional sub-keys."""

    def __init__(self):
        self._counts: Counter = Counter()
        self._detail: Dict[str, Counter] = {}
        self._notes: List[str] = []
        self._lock = threading.Lock()
        self.logger = get_logger("diagnostics")

    def record(self, flag: str, detail: Optional[str] = None, count: int = 1):
        with self._lock:
            self._counts[flag] += count
            if detail is not None:
                self._detail.setdefault(flag, Counter())[detail] += count
        self.logger.debug(f"{flag}: {detail or ''}", key=flag)

    def record_many(self, flag: str, details: Iterable[str]):
        for detail in details:
            self.record(flag, detail)

    def note(self, message: str):
        with self._lock:
            self._notes.append(message)
        self.logger.warning(message, key="note")

    def count(self, flag: str, detail: Optional[str] = None) -> int:
        with self._lock:
            if detail is None:
                return self._counts.get(flag, 0)
            return self._detail.get(flag, Counter()).get(detail, 0)

    def reset(self):
        with self._lock:
            self._counts.clear()
            self._detail.clear()
            self._notes.clear()

    def report(self) -> Dict[str, Any]:
        """Snapshot suitable for JSON output, keys sorted."""
        with self._lock:
            return {
                "counts": dict(sorted(self._counts.items())),
                "detail": {flag: dict(sorted(c.items())) for flag, c in sorted(self._detail.items())},
                "notes": list(self._notes),
            }


_diagnostics = RunDiagnostics()


def get_diagnostics() -> RunDiagnostics:
    return _diagnostics
