"""Error types, categorization and user-facing messaging."""
import json
import re
from typing import Any, Dict, Optional

import numpy as np

from .datastructures import ErrorCategory, ErrorInfo


class HfSelectError(Exception):
    """Base error carrying a category and an optional context (series, origin, field)."""

    category = ErrorCategory.UNKNOWN

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context: Dict[str, Any] = dict(context)

    def with_context(self, **context: Any) -> "HfSelectError":
        self.context.update(context)
        return self

    def __str__(self) -> str:
        if not self.context:
            return self.message
        ctx = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{self.message} [{ctx}]"


class ValidationError(HfSelectError):
    category = ErrorCategory.VALIDATION


class ConfigError(HfSelectError):
    category = ErrorCategory.CONFIG


class DataError(HfSelectError):
    category = ErrorCategory.DATA


class DimensionError(HfSelectError):
    category = ErrorCategory.DIMENSION


class NumericalError(HfSelectError):
    category = ErrorCategory.NUMERICAL


class ModelError(HfSelectError):
    category = ErrorCategory.MODEL


class ErrorHandler:
    """Handles error categorization and user-friendly messaging."""

    # Patterns for exceptions raised outside the package
    ERROR_PATTERNS = {
        ErrorCategory.DIMENSION: [
            r'shapes? .* not aligned',
            r'dimension mismatch',
            r'operands could not be broadcast',
            r'size \d+ is different from',
        ],
        ErrorCategory.NUMERICAL: [
            r'singular matrix',
            r'not positive definite',
            r'did not converge',
            r'divide by zero',
        ],
        ErrorCategory.DATA: [
            r'no such file',
            r'missing column',
            r'could not convert',
            r'expecting value',
        ],
    }

    TROUBLESHOOTING_HINTS = {
        ErrorCategory.VALIDATION: (
            "1. Check the hierarchy edges form a single rooted tree\n"
            "2. Check input matrices have one row per node in hierarchy order\n"
            "3. Check window settings leave enough periods for fitting"
        ),
        ErrorCategory.CONFIG: (
            "1. Check the field named in the message\n"
            "2. Compare against the run-config layout documented in hfselect/config.py\n"
            "3. Flag overrides take precedence over the config file"
        ),
        ErrorCategory.DATA: (
            "1. Data CSV needs hierarchy_id,node_id,period,value columns\n"
            "2. Every node needs a value for every period\n"
            "3. Upper-level rows, when present, must equal the sum of their children"
        ),
        ErrorCategory.DIMENSION: (
            "1. Base forecasts must have m rows in node order\n"
            "2. Residual matrices must share the same column count"
        ),
        ErrorCategory.NUMERICAL: (
            "1. Check for constant or duplicated series\n"
            "2. Increase the ridge term of the base model\n"
            "3. Use a longer training window"
        ),
        ErrorCategory.MODEL: (
            "1. Retrain the selector with the current feature registry\n"
            "2. Check that the training set contains at least two classes"
        ),
    }

    SUGGESTED_ACTIONS = {
        ErrorCategory.VALIDATION: "Fix the invalid input and re-run",
        ErrorCategory.CONFIG: "Correct the configuration field",
        ErrorCategory.DATA: "Repair the data files",
        ErrorCategory.DIMENSION: "Align matrix shapes with the hierarchy",
        ErrorCategory.NUMERICAL: "Regularize the model or extend the data window",
        ErrorCategory.MODEL: "Retrain or replace the selector bundle",
    }

    # Exit status per category for the CLI
    EXIT_CODES = {
        ErrorCategory.VALIDATION: 1,
        ErrorCategory.CONFIG: 1,
        ErrorCategory.DATA: 1,
    }

    @classmethod
    def categorize_error(cls, error: BaseException) -> ErrorInfo:
        """Categorize an exception and provide user-friendly information."""
        if isinstance(error, HfSelectError):
            return cls._create_error_info(error.category, str(error), error, error.context)
        if isinstance(error, np.linalg.LinAlgError):
            return cls._create_error_info(ErrorCategory.NUMERICAL, str(error), error)
        if isinstance(error, (FileNotFoundError, json.JSONDecodeError, KeyError)):
            return cls._create_error_info(ErrorCategory.DATA, str(error), error)

        error_lower = str(error).lower()
        for category, patterns in cls.ERROR_PATTERNS.items():
            for pattern in patterns:
                if re.search(pattern, error_lower):
                    return cls._create_error_info(category, str(error), error)
        return cls._create_error_info(ErrorCategory.UNKNOWN, str(error), error)

    @classmethod
    def _create_error_info(cls, category: ErrorCategory, message: str,
                           original: Optional[BaseException] = None,
                           context: Optional[Dict[str, Any]] = None) -> ErrorInfo:
        return ErrorInfo(
            category=category,
            message=message,
            original_error=repr(original) if original is not None else None,
            troubleshooting_hint=cls.TROUBLESHOOTING_HINTS.get(category),
            suggest_action=cls.SUGGESTED_ACTIONS.get(category),
            context=dict(context or {}),
        )

    @classmethod
    def format_error(cls, error_info: ErrorInfo, include_troubleshooting: bool = True) -> str:
        """Format error information for the terminal."""
        parts = [
            f"error: {error_info.message}",
            f"category: {error_info.category.value}",
        ]
        if error_info.suggest_action:
            parts.append(f"suggested action: {error_info.suggest_action}")
        if include_troubleshooting and error_info.troubleshooting_hint:
            parts.extend(["", "troubleshooting:", error_info.troubleshooting_hint])
        return "\n".join(parts)

    @classmethod
    def exit_code(cls, error: BaseException) -> int:
        info = cls.categorize_error(error)
        return cls.EXIT_CODES.get(info.category, 2)


class ProgressReporter:
    """Formats progress messages for long-running loops."""

    @staticmethod
    def format_progress(current: int, total: int, operation: str,
                        item: Optional[str] = None) -> str:
        if total > 0:
            percentage = (current / total) * 100
            bar = "#" * int(percentage // 5) + "." * (20 - int(percentage // 5))
            item_str = f" ({item})" if item else ""
            return f"{operation}: {percentage:.1f}% |{bar}| ({current}/{total}){item_str}"
        return f"{operation}: {current} items processed"
