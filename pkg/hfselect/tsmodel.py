"""Per-series base forecasting models.

The default model is a linear regression on the price regressor with AR(p)
errors, estimated in two least-squares stages (regression first, then the AR
recursion on the regression residuals). MA terms are not modelled.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import diagnostics
from .datastructures import BaseForecasts, BaseModelSpec, FitResult, ModelKind
from .error_handler import HfSelectError, ValidationError
from .hierarchy import HierSeriesSet
from .logging_manager import get_logger

logger = get_logger("tsmodel")

# Ridge applied when a design matrix is rank deficient
FALLBACK_RIDGE = 1e-8


def _least_squares(X: np.ndarray, y: np.ndarray, ridge: float) -> Tuple[np.ndarray, bool]:
    """Solve min |y - X b|^2 + ridge |b|^2. Returns (b, fell_back_to_ridge)."""
    fell_back = False
    if ridge <= 0.0 and np.linalg.matrix_rank(X) < X.shape[1]:
        ridge = FALLBACK_RIDGE
        fell_back = True
    if ridge > 0.0:
        k = X.shape[1]
        X = np.vstack([X, np.sqrt(ridge) * np.eye(k)])
        y = np.concatenate([y, np.zeros(k)])
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    return beta, fell_back


def _fit_reg_ar(y: np.ndarray, x: Optional[np.ndarray], p: int, ridge: float, h: int) -> FitResult:
    n = len(y)
    warnings: List[str] = []

    if x is not None:
        X1 = np.column_stack([np.ones(n + h), x])
    else:
        X1 = np.ones((n + h, 1))
    beta, fb = _least_squares(X1[:n], y, ridge)
    if fb:
        warnings.append("ridge_fallback:regression")
    u = y - X1[:n] @ beta

    if p == 0:
        residuals = u.copy()
        u_future = np.zeros(h)
        phi = np.zeros(1)
    else:
        Z = np.column_stack([np.ones(n - p)] + [u[p - j:n - j] for j in range(1, p + 1)])
        phi, fb = _least_squares(Z, u[p:], ridge)
        if fb:
            warnings.append("ridge_fallback:ar")
        residuals = u[p:] - Z @ phi
        history = list(u[-p:])
        u_future = np.empty(h)
        for step in range(h):
            lags = history[::-1][:p]
            u_next = phi[0] + float(np.dot(phi[1:], lags))
            u_future[step] = u_next
            history.append(u_next)

    forecasts = X1[n:] @ beta + u_future
    coefficients = {"regression": beta.tolist(), "ar": phi.tolist()}
    return FitResult(forecasts=forecasts, residuals=residuals, coefficients=coefficients, warnings=warnings)


def fit_predict(series: np.ndarray, regressor: Optional[np.ndarray], spec: BaseModelSpec,
                h: int) -> FitResult:
    """Fit one series and forecast h steps ahead.

    Args:
        series: observations y_1..y_n
        regressor: regressor values for periods 1..n+h (required when the model uses it)
        spec: model specification
        h: forecast horizon

    Returns:
        FitResult with h forecasts and the one-step in-sample residuals of the full model.
    """
    y = np.asarray(series, dtype=float)
    n = len(y)
    if h < 1:
        raise ValidationError(f"Horizon must be >= 1, got {h}")
    if spec.ridge < 0:
        raise ValidationError(f"ridge must be >= 0, got {spec.ridge}")
    if n < spec.min_length:
        raise ValidationError(f"Series length {n} is below the minimum {spec.min_length} for p={spec.ar_order}")
    if spec.ar_order > n / 4:
        raise ValidationError(f"AR order {spec.ar_order} exceeds n/4 for n={n}")

    if spec.kind == ModelKind.NAIVE:
        result = FitResult(forecasts=np.full(h, y[-1]), residuals=np.diff(y))
    elif spec.kind == ModelKind.MEAN:
        mean = y.mean()
        result = FitResult(forecasts=np.full(h, mean), residuals=y - mean)
    else:
        x = None
        if spec.kind == ModelKind.REG_AR and spec.use_regressor:
            if regressor is None:
                raise ValidationError("Model uses a regressor but none was supplied")
            x = np.asarray(regressor, dtype=float)
            if len(x) != n + h:
                raise ValidationError(f"Regressor needs n + h = {n + h} values (future included), got {len(x)}")
        result = _fit_reg_ar(y, x, spec.ar_order, spec.ridge, h)

    if spec.truncate_nonneg:
        result.forecasts = np.maximum(result.forecasts, 0.0)
    return result


def forecast_hierarchy(data: HierSeriesSet, spec: BaseModelSpec, origin: int, h: int,
                       future_regressors: Optional[np.ndarray] = None, jobs: int = 1) -> BaseForecasts:
    """Fit every series independently on periods 1..origin and forecast h steps.

    Args:
        data: the hierarchy's observations
        spec: base model specification shared by all series
        origin: number of training periods
        h: forecast horizon
        future_regressors: m x h regressor values, needed when origin + h exceeds the data
        jobs: worker threads for the per-series fits

    Returns:
        BaseForecasts in node order; generally incoherent.
    """
    hier = data.hierarchy
    if origin < spec.min_length or origin > data.n:
        raise ValidationError(f"Origin {origin} outside [{spec.min_length}, {data.n}]",
                              hierarchy=data.hierarchy_id)

    uses_regressor = spec.kind == ModelKind.REG_AR and spec.use_regressor
    regressors = None
    if uses_regressor:
        if data.regressors is None:
            logger.warning(f"Hierarchy {data.hierarchy_id} has no regressors; fitting without",
                           key="no_regressor")
            spec = BaseModelSpec(kind=spec.kind, ar_order=spec.ar_order, use_regressor=False,
                                 ridge=spec.ridge, truncate_nonneg=spec.truncate_nonneg)
        else:
            known = data.regressors[:, :min(origin + h, data.n)]
            missing = origin + h - known.shape[1]
            if missing > 0:
                if future_regressors is None:
                    raise ValidationError(
                        f"Forecasting past the data end needs {missing} future regressor values per series",
                        hierarchy=data.hierarchy_id, origin=origin)
                future = np.asarray(future_regressors, dtype=float)
                if future.shape[0] != hier.m or future.shape[1] < missing:
                    raise ValidationError(f"future_regressors must be {hier.m} x {missing} or wider",
                                          hierarchy=data.hierarchy_id)
                known = np.hstack([known, future[:, future.shape[1] - missing:]])
            regressors = known

    def fit_one(i: int) -> FitResult:
        x = regressors[i] if regressors is not None else None
        try:
            return fit_predict(data.observations[i, :origin], x, spec, h)
        except HfSelectError as exc:
            raise exc.with_context(series=hier.nodes[i], hierarchy=data.hierarchy_id, origin=origin)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs, thread_name_prefix="fit") as pool:
            results = list(pool.map(fit_one, range(hier.m)))
    else:
        results = [fit_one(i) for i in range(hier.m)]

    warnings: Dict[str, List[str]] = {}
    diag = diagnostics.get_diagnostics()
    for node, res in zip(hier.nodes, results):
        if res.warnings:
            warnings[node] = res.warnings
            diag.record(diagnostics.RIDGE_FALLBACK, f"{data.hierarchy_id}:{node}")
            logger.warning(f"Rank-deficient design for {data.hierarchy_id}:{node} at origin {origin}; "
                           f"ridge {FALLBACK_RIDGE} applied", key="ridge_fallback")

    return BaseForecasts(
        forecasts=np.vstack([r.forecasts for r in results]),
        residuals=np.vstack([r.residuals for r in results]),
        origin=origin,
        warnings=warnings,
    )
