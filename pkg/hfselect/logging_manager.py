"""Rate-limited logging with operation timing.

All loggers share one file handler writing ``hfselect.log`` under ``HFSELECT_LOG_DIR``
(default ``<tmp>/hfselect_logs``); the level comes from ``HFSELECT_LOG``.
"""

import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

from .error_handler import ProgressReporter

LOG_FORMAT = "%(asctime)s - [%(threadName)s] - %(name)s - %(levelname)s - %(message)s"

# Minimum seconds between two lines with the same key
DEFAULT_INTERVALS = {
    logging.DEBUG: 5.0,
    logging.INFO: 0.0,
    logging.WARNING: 1.0,
    logging.ERROR: 0.5,
}
PERF_INTERVAL = 10.0
PROGRESS_INTERVAL = 2.0

_SUFFIX = {
    logging.DEBUG: "debug",
    logging.INFO: "info",
    logging.WARNING: "warning",
    logging.ERROR: "error",
}


def _default_log_dir() -> Path:
    env_dir = os.getenv("HFSELECT_LOG_DIR")
    if env_dir:
        return Path(env_dir)
    return Path(tempfile.gettempdir()) / "hfselect_logs"


def _env_level() -> int:
    name = os.getenv("HFSELECT_LOG", "INFO").upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.INFO


@dataclass
class OperationTiming:
    count: int = 0
    total_time: float = 0.0
    min_time: float = float("inf")
    max_time: float = 0.0

    def add(self, duration: float):
        self.count += 1
        self.total_time += duration
        self.min_time = min(self.min_time, duration)
        self.max_time = max(self.max_time, duration)

    def summary(self) -> Dict[str, float]:
        return {
            "count": self.count,
            "avg_time": self.total_time / self.count,
            "min_time": self.min_time,
            "max_time": self.max_time,
            "total_time": self.total_time,
        }


class RateLimitedLogger:
    """Logger with per-key rate limiting and performance tracking.

    Per-series loops emit the same warning thousands of times (ridge fallbacks,
    non-finite features); the key-based limiter keeps one line per interval and
    counts the rest as suppressed.
    """

    def __init__(self, name: str, log_dir: Optional[Path] = None):
        self.name = name
        self.logger = logging.getLogger(name)
        self.intervals: Dict[int, float] = dict(DEFAULT_INTERVALS)

        self._last_emit: Dict[str, float] = {}
        self._emitted: Dict[str, int] = {}
        self._suppressed: Dict[str, int] = {}
        self._timings: Dict[str, OperationTiming] = {}
        self._lock = threading.Lock()
        self._created = time.time()

        _attach_shared_handler(self.logger, log_dir)

    def _allow(self, key: str, interval: float) -> bool:
        now = time.time()
        with self._lock:
            if now - self._last_emit.get(key, 0.0) >= interval:
                self._last_emit[key] = now
                self._emitted[key] = self._emitted.get(key, 0) + 1
                return True
            self._suppressed[key] = self._suppressed.get(key, 0) + 1
            return False

    def _emit(self, level: int, message: str, key: Optional[str]):
        suffix = _SUFFIX[level]
        if self._allow(f"{key}_{suffix}" if key else suffix, self.intervals.get(level, 1.0)):
            self.logger.log(level, message)

    def debug(self, message: str, key: Optional[str] = None):
        self._emit(logging.DEBUG, message, key)

    def info(self, message: str, key: Optional[str] = None):
        self._emit(logging.INFO, message, key)

    def warning(self, message: str, key: Optional[str] = None):
        self._emit(logging.WARNING, message, key)

    def error(self, message: str, key: Optional[str] = None):
        self._emit(logging.ERROR, message, key)

    def critical(self, message: str, key: Optional[str] = None):
        self.logger.critical(message)

    def performance(self, operation: str, duration: float, details: Optional[Dict] = None):
        """Accumulate timing for an operation; log it at most once per PERF_INTERVAL."""
        with self._lock:
            self._timings.setdefault(operation, OperationTiming()).add(duration)
        if self._allow(f"{operation}_perf", PERF_INTERVAL):
            suffix = f" - {details}" if details else ""
            self.logger.info(f"PERF: {operation} took {duration:.3f}s{suffix}")

    def get_performance_report(self) -> Dict[str, Dict[str, float]]:
        with self._lock:
            return {op: t.summary() for op, t in self._timings.items() if t.count}

    def reset_rate_limits(self):
        with self._lock:
            self._last_emit.clear()
            self._emitted.clear()
            self._suppressed.clear()

    def reset_performance(self):
        with self._lock:
            self._timings.clear()

    def getChild(self, suffix: str) -> "RateLimitedLogger":
        return get_logger(f"{self.name.split('.', 1)[-1]}.{suffix}")

    def get_stats(self) -> Dict[str, Any]:
        with self._lock:
            return {
                "log_counts": dict(self._emitted),
                "suppressed": dict(self._suppressed),
                "uptime_seconds": time.time() - self._created,
                "performance_metrics": {op: t.summary() for op, t in self._timings.items() if t.count},
            }


class ContextLogger:
    """Brackets pipeline stages with start/end lines, timing and progress."""

    def __init__(self, rate_limited_logger: RateLimitedLogger):
        self.base_logger = rate_limited_logger
        self._starts: Dict[str, float] = {}
        self._lock = threading.Lock()

    def log_operation_start(self, operation: str, details: Optional[str] = None):
        with self._lock:
            self._starts[operation] = time.time()
        suffix = f" - {details}" if details else ""
        self.base_logger.info(f"Starting {operation}{suffix}", f"{operation}_start")

    def log_progress(self, operation: str, current: int, total: int, item: Optional[str] = None):
        if current == total or self.base_logger._allow(f"{operation}_progress", PROGRESS_INTERVAL):
            self.base_logger.logger.info(ProgressReporter.format_progress(current, total, operation, item))

    def log_operation_end(self, operation: str, success: bool = True, details: Optional[str] = None):
        end_time = time.time()
        with self._lock:
            duration = end_time - self._starts.pop(operation, end_time)

        self.base_logger.performance(operation, duration, {"success": success, "details": details})

        suffix = f" - {details}" if details else ""
        msg = f"{operation} {'ok' if success else 'failed'} in {duration:.3f}s{suffix}"
        if success:
            self.base_logger.info(msg, f"{operation}_end")
        else:
            self.base_logger.warning(msg, f"{operation}_end")


_loggers: Dict[str, RateLimitedLogger] = {}
_logger_lock = threading.Lock()
_handler_lock = threading.Lock()
_shared_handler: Optional[logging.Handler] = None


def _attach_shared_handler(target: logging.Logger, log_dir: Optional[Path] = None):
    global _shared_handler
    with _handler_lock:
        if _shared_handler is None:
            directory = log_dir or _default_log_dir()
            directory.mkdir(exist_ok=True, parents=True)
            _shared_handler = logging.FileHandler(str(directory / "hfselect.log"))
            _shared_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    if _shared_handler not in target.handlers:
        target.addHandler(_shared_handler)
    target.setLevel(_env_level())
    target.propagate = False


def get_logger(name: str) -> RateLimitedLogger:
    """Get or create the rate-limited logger ``hfselect.<name>``."""
    with _logger_lock:
        if name not in _loggers:
            _loggers[name] = RateLimitedLogger(f"hfselect.{name}")
        return _loggers[name]


def get_context_logger(name: str) -> ContextLogger:
    return ContextLogger(get_logger(name))


def performance_report() -> Dict[str, Dict[str, Dict[str, float]]]:
    """Timing report across all loggers, keyed by logger name."""
    with _logger_lock:
        loggers = dict(_loggers)
    report = {name: lg.get_performance_report() for name, lg in loggers.items()}
    return {name: ops for name, ops in report.items() if ops}


def reset_performance():
    """Clear timings on every logger so a report covers one command."""
    with _logger_lock:
        loggers = list(_loggers.values())
    for lg in loggers:
        lg.reset_performance()
