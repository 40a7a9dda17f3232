"""Time-series features and their per-level averages (the classifier input).

Registry definitions
--------------------
Most features are computed on the z-scored series, which makes them invariant to
positive affine rescaling; ``lumpiness``, ``stability``, ``spike`` and
``max_var_shift`` are computed on the original scale.

entropy            normalized Shannon entropy of the periodogram (DC excluded); 1 for a flat spectrum
lumpiness          variance of the variances of non-overlapping tiles of width 10
stability          variance of the means of the same tiles
hurst              rescaled-range estimate: slope of log(R/S) on log(window), windows 8, 16, ... <= n/2
x_acf1, x_acf10    first autocorrelation; sum of squares of the first 10
diff1_*, diff2_*   the same on first and second differences
seas_acf1          autocorrelation at the seasonal lag (period > 1 only)
x_pacf5            sum of squares of the first 5 partial autocorrelations (and on differences)
seas_pacf          partial autocorrelation at the seasonal lag (period > 1 only)
e_acf1, e_acf10    acf features of the decomposition remainder
trend              max(0, 1 - var(remainder) / var(trend + remainder))
seasonal_strength  max(0, 1 - var(remainder) / var(seasonal + remainder)) (period > 1 only)
spike              variance of the leave-one-out variances of the remainder
linearity          coefficient of the degree-1 orthonormal polynomial fitted to the trend
curvature          coefficient of the degree-2 orthonormal polynomial fitted to the trend
nonlinearity       10 * n_eff * R^2 / n of the cubic auxiliary regression on AR(1) residuals
arch_lm            ARCH LM statistic (12 lags, fewer on short series)
unitroot_kpss      KPSS level-stationarity statistic
max_var_shift      largest absolute change between rolling variances (window 10) one window apart
fluctanal_prop_r1  breakpoint proportion of a two-segment fit to the log-log DFA fluctuation curve
nperiods           1 when a seasonal period is set, else 0
seasonal_period    the seasonal period

Non-finite values (undefined ratios, failed regressions, too-short inputs) are
replaced by 0 and tallied in the run diagnostics.
"""
import warnings
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Tuple

import numpy as np
import pandas as pd
from scipy import signal
from statsmodels.stats.diagnostic import het_arch
from statsmodels.tsa.seasonal import seasonal_decompose
from statsmodels.tsa.stattools import acf, kpss, pacf

from . import diagnostics
from .datastructures import FeatureMatrix, FeatureVector
from .error_handler import ValidationError
from .hierarchy import HierSeriesSet
from .logging_manager import get_logger

logger = get_logger("features")

REGISTRY_VERSION = "v1"

FEATURE_REGISTRY: Tuple[str, ...] = (
    "entropy", "lumpiness", "stability", "hurst",
    "x_acf1", "x_acf10", "diff1_acf1", "diff1_acf10", "diff2_acf1", "diff2_acf10", "seas_acf1",
    "x_pacf5", "diff1x_pacf5", "diff2x_pacf5", "seas_pacf",
    "e_acf1", "e_acf10",
    "trend", "seasonal_strength", "spike", "linearity", "curvature",
    "nonlinearity", "arch_lm", "unitroot_kpss", "max_var_shift", "fluctanal_prop_r1",
    "nperiods", "seasonal_period",
)
SEASONAL_FEATURES = frozenset({"seas_acf1", "seas_pacf", "seasonal_strength"})
SCALE_INVARIANT_FEATURES = frozenset({
    "entropy", "x_acf1", "x_acf10", "diff1_acf1", "diff1_acf10", "diff2_acf1", "diff2_acf10",
    "seas_acf1", "x_pacf5", "diff1x_pacf5", "diff2x_pacf5", "seas_pacf", "e_acf1", "e_acf10",
    "trend", "seasonal_strength", "nonlinearity",
})

MIN_LENGTH = 12
TILE_WIDTH = 10
VARIANCE_WINDOW = 10
ARCH_LAGS = 12


def feature_names(seasonal_period: int = 1) -> List[str]:
    """Registry order; seasonal features only when the period exceeds 1."""
    if seasonal_period > 1:
        return list(FEATURE_REGISTRY)
    return [f for f in FEATURE_REGISTRY if f not in SEASONAL_FEATURES]


def registry_tag(seasonal_period: int = 1) -> str:
    return f"registry-{REGISTRY_VERSION}-z{len(feature_names(seasonal_period))}-p{seasonal_period}"


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std(ddof=1) if len(x) > 1 else 0.0
    if not np.isfinite(sd) or sd == 0.0:
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def _is_flat(x: np.ndarray) -> bool:
    return len(x) < 2 or bool(np.all(x == x[0]))


def _acf_pair(x: np.ndarray, nlags: int = 10) -> Tuple[float, float]:
    """(acf at lag 1, sum of squared acf over lags 1..nlags)."""
    if len(x) < 3 or _is_flat(x):
        return np.nan, np.nan
    lags = min(nlags, len(x) - 1)
    r = acf(x, nlags=lags, fft=False)
    return float(r[1]), float(np.sum(r[1:lags + 1] ** 2))


def _pacf_sum(x: np.ndarray, nlags: int = 5) -> float:
    lags = min(nlags, len(x) // 2 - 1)
    if lags < 1 or _is_flat(x):
        return np.nan
    r = pacf(x, nlags=lags, method="ldb")
    return float(np.sum(r[1:lags + 1] ** 2))


def _centered_moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Centered MA whose window shrinks symmetrically at the ends."""
    n = len(x)
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(x)])
    out = np.empty(n)
    for i in range(n):
        w = min(half, i, n - 1 - i)
        out[i] = (csum[i + w + 1] - csum[i - w]) / (2 * w + 1)
    return out


def _trend_window(n: int) -> int:
    w = int(round(n / 4))
    if w % 2 == 0:
        w += 1
    return max(3, min(13, w))


def decompose(z: np.ndarray, seasonal_period: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(trend, seasonal, remainder) of a series."""
    n = len(z)
    if seasonal_period > 1 and n >= 2 * seasonal_period:
        res = seasonal_decompose(z, period=seasonal_period, model="additive",
                                 two_sided=True, extrapolate_trend="freq")
        trend = np.asarray(res.trend, dtype=float)
        seasonal = np.asarray(res.seasonal, dtype=float)
        return trend, seasonal, z - trend - seasonal
    trend = _centered_moving_average(z, _trend_window(n))
    return trend, np.zeros(n), z - trend


def _strength(component: np.ndarray, remainder: np.ndarray) -> float:
    denom = np.var(component + remainder, ddof=1)
    if denom <= 0.0:
        return 0.0
    return float(max(0.0, 1.0 - np.var(remainder, ddof=1) / denom))


def _spike(remainder: np.ndarray) -> float:
    n = len(remainder)
    if n < 4:
        return np.nan
    total, total_sq = remainder.sum(), (remainder ** 2).sum()
    loo = (total_sq - remainder ** 2 - (total - remainder) ** 2 / (n - 1)) / (n - 2)
    return float(np.var(loo, ddof=1))


def _poly_coefficients(trend: np.ndarray) -> Tuple[float, float]:
    """Coefficients on orthonormal polynomials of degree 1 and 2."""
    t = np.arange(len(trend), dtype=float)
    V = np.column_stack([np.ones_like(t), t, t ** 2])
    Q, R = np.linalg.qr(V)
    Q = Q * np.sign(np.diag(R))
    coef = Q[:, 1:].T @ trend
    return float(coef[0]), float(coef[1])


def _tiles(x: np.ndarray) -> List[np.ndarray]:
    return [x[i:i + TILE_WIDTH] for i in range(0, len(x), TILE_WIDTH) if len(x[i:i + TILE_WIDTH]) >= 2]


def _lumpiness_stability(x: np.ndarray) -> Tuple[float, float]:
    tiles = _tiles(x)
    if len(tiles) < 2:
        return np.nan, np.nan
    variances = np.array([t.var(ddof=1) for t in tiles])
    means = np.array([t.mean() for t in tiles])
    return float(variances.var(ddof=1)), float(means.var(ddof=1))


def _hurst(z: np.ndarray) -> float:
    n = len(z)
    sizes, rs = [], []
    w = 8
    while w <= n // 2:
        chunks = z[: (n // w) * w].reshape(-1, w)
        dev = chunks - chunks.mean(axis=1, keepdims=True)
        cum = np.cumsum(dev, axis=1)
        r = cum.max(axis=1) - cum.min(axis=1)
        s = chunks.std(axis=1)
        ok = s > 0
        if ok.any():
            sizes.append(w)
            rs.append(np.mean(r[ok] / s[ok]))
        w *= 2
    if len(sizes) < 2:
        return np.nan
    slope = np.polyfit(np.log(sizes), np.log(rs), 1)[0]
    return float(slope)


def _entropy(z: np.ndarray) -> float:
    if _is_flat(z):
        return 1.0
    _, psd = signal.periodogram(z, detrend=False)
    psd = psd[1:]
    if len(psd) < 2 or psd.sum() <= 0:
        return 1.0
    p = psd / psd.sum()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)) / np.log(len(psd)))


def _nonlinearity(z: np.ndarray) -> float:
    n = len(z)
    if n < 6 or _is_flat(z):
        return np.nan
    y, lag = z[1:], z[:-1]
    X1 = np.column_stack([np.ones_like(lag), lag])
    u = y - X1 @ np.linalg.lstsq(X1, y, rcond=None)[0]
    X2 = np.column_stack([X1, lag ** 2, lag ** 3])
    e = u - X2 @ np.linalg.lstsq(X2, u, rcond=None)[0]
    sst = np.sum((u - u.mean()) ** 2)
    if sst <= 0:
        return np.nan
    r2 = 1.0 - np.sum(e ** 2) / sst
    return float(10.0 * len(u) * r2 / n)


def _arch_lm(z: np.ndarray) -> float:
    lags = min(ARCH_LAGS, (len(z) - 2) // 3)
    if lags < 1 or _is_flat(z):
        return np.nan
    return float(het_arch(z, nlags=lags)[0])


def _kpss(z: np.ndarray) -> float:
    if _is_flat(z):
        return np.nan
    return float(kpss(z, regression="c", nlags="auto")[0])


def _max_var_shift(x: np.ndarray) -> float:
    rv = pd.Series(x).rolling(VARIANCE_WINDOW).var().dropna().to_numpy()
    if len(rv) > VARIANCE_WINDOW:
        shifts = np.abs(rv[VARIANCE_WINDOW:] - rv[:-VARIANCE_WINDOW])
    elif len(rv) > 1:
        shifts = np.abs(np.diff(rv))
    else:
        return np.nan
    return float(shifts.max())


def _fluctanal_prop_r1(z: np.ndarray) -> float:
    n = len(z)
    if n < 12 or _is_flat(z):
        return np.nan
    y = np.cumsum(z)
    taus = np.unique(np.round(np.exp(np.linspace(np.log(5), np.log(n / 2), 50))).astype(int))
    if len(taus) < 6:
        return np.nan
    fluct = []
    for tau in taus:
        segments = y[: (n // tau) * tau].reshape(-1, tau)
        t = np.arange(tau, dtype=float)
        D = np.column_stack([np.ones(tau), t])
        beta = np.linalg.lstsq(D, segments.T, rcond=None)[0]
        resid = segments.T - D @ beta
        fluct.append(np.sqrt(np.mean(resid ** 2)))
    fluct = np.asarray(fluct)
    if np.any(fluct <= 0):
        return np.nan
    lx, ly = np.log(taus), np.log(fluct)
    ntau = len(taus)
    best_i, best_sse = None, np.inf
    for i in range(2, ntau - 2):
        sse = 0.0
        for sl in (slice(0, i + 1), slice(i, ntau)):
            coef = np.polyfit(lx[sl], ly[sl], 1)
            sse += float(np.sum((np.polyval(coef, lx[sl]) - ly[sl]) ** 2))
        if sse < best_sse:
            best_i, best_sse = i, sse
    return float((best_i + 1) / ntau)


def _compute_raw(x: np.ndarray, seasonal_period: int) -> Dict[str, float]:
    z = _zscore(x)
    sd = x.std(ddof=1) if len(x) > 1 else 0.0
    values: Dict[str, float] = {}

    def guarded(names: Tuple[str, ...], fn: Callable[[], object]):
        try:
            with warnings.catch_warnings(), np.errstate(all="ignore"):
                warnings.simplefilter("ignore")
                out = fn()
        except Exception as exc:  # feature fallbacks absorb degenerate inputs
            logger.debug(f"Feature {names} failed: {exc}", key=f"feature_{names[0]}")
            out = (np.nan,) * len(names)
        if len(names) == 1:
            out = (out,)
        for name, value in zip(names, out):
            values[name] = value

    guarded(("entropy",), lambda: _entropy(z))
    guarded(("lumpiness", "stability"), lambda: _lumpiness_stability(x))
    guarded(("hurst",), lambda: _hurst(z))
    guarded(("x_acf1", "x_acf10"), lambda: _acf_pair(z))
    guarded(("diff1_acf1", "diff1_acf10"), lambda: _acf_pair(np.diff(z)))
    guarded(("diff2_acf1", "diff2_acf10"), lambda: _acf_pair(np.diff(z, n=2)))
    guarded(("x_pacf5",), lambda: _pacf_sum(z))
    guarded(("diff1x_pacf5",), lambda: _pacf_sum(np.diff(z)))
    guarded(("diff2x_pacf5",), lambda: _pacf_sum(np.diff(z, n=2)))

    if seasonal_period > 1:
        guarded(("seas_acf1",), lambda: float(acf(z, nlags=seasonal_period, fft=False)[seasonal_period])
                if len(z) > seasonal_period and not _is_flat(z) else np.nan)
        guarded(("seas_pacf",), lambda: float(pacf(z, nlags=seasonal_period, method="ldb")[seasonal_period])
                if seasonal_period < len(z) // 2 and not _is_flat(z) else np.nan)

    trend, seasonal, remainder = decompose(z, seasonal_period)
    guarded(("e_acf1", "e_acf10"), lambda: _acf_pair(remainder))
    guarded(("trend",), lambda: _strength(trend, remainder))
    if seasonal_period > 1:
        guarded(("seasonal_strength",), lambda: _strength(seasonal, remainder))
    guarded(("spike",), lambda: _spike(remainder * sd))
    guarded(("linearity", "curvature"), lambda: _poly_coefficients(trend))
    guarded(("nonlinearity",), lambda: _nonlinearity(z))
    guarded(("arch_lm",), lambda: _arch_lm(z))
    guarded(("unitroot_kpss",), lambda: _kpss(z))
    guarded(("max_var_shift",), lambda: _max_var_shift(x))
    guarded(("fluctanal_prop_r1",), lambda: _fluctanal_prop_r1(z))

    values["nperiods"] = 1.0 if seasonal_period > 1 else 0.0
    values["seasonal_period"] = float(seasonal_period)
    return values


def compute_features(series: np.ndarray, seasonal_period: int = 1) -> FeatureVector:
    """Compute the registry features of one series.

    Never fails on short or degenerate input; undefined values become 0.
    """
    x = np.asarray(series, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValidationError("Series contains missing values")
    if seasonal_period < 1:
        raise ValidationError(f"seasonal_period must be >= 1, got {seasonal_period}")
    if len(x) < MIN_LENGTH:
        logger.warning(f"Series of length {len(x)} is shorter than {MIN_LENGTH}; fallbacks apply",
                       key="short_series")

    raw = _compute_raw(x, seasonal_period)
    names = feature_names(seasonal_period)
    values, nonfinite = {}, []
    for name in names:
        v = raw.get(name, np.nan)
        if v is None or not np.isfinite(v):
            nonfinite.append(name)
            v = 0.0
        values[name] = float(v)
    if nonfinite:
        diagnostics.get_diagnostics().record_many(diagnostics.NONFINITE_FEATURE, nonfinite)
    return FeatureVector(values=values, registry_tag=registry_tag(seasonal_period), nonfinite=nonfinite)


def series_features(data: HierSeriesSet, origin: int, seasonal_period: int = 1,
                    jobs: int = 1) -> List[FeatureVector]:
    """Feature vectors of all m series on periods 1..origin, in node order."""
    if origin > data.n:
        raise ValidationError(f"Origin {origin} beyond data length {data.n}", hierarchy=data.hierarchy_id)
    rows = [data.observations[i, :origin] for i in range(data.hierarchy.m)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs, thread_name_prefix="features") as pool:
            return list(pool.map(lambda r: compute_features(r, seasonal_period), rows))
    return [compute_features(r, seasonal_period) for r in rows]


def feature_matrix(data: HierSeriesSet, origin: int, seasonal_period: int = 1,
                   jobs: int = 1) -> FeatureMatrix:
    """Per-level means of the series features (k x z), flattened level-major."""
    if origin < MIN_LENGTH:
        raise ValidationError(f"Feature origin must be >= {MIN_LENGTH}, got {origin}", hierarchy=data.hierarchy_id)
    names = feature_names(seasonal_period)
    vectors = series_features(data, origin, seasonal_period, jobs)
    table = np.vstack([v.as_array(names) for v in vectors])
    levels = data.hierarchy.levels
    means = np.vstack([table[levels == lvl].mean(axis=0) for lvl in range(data.hierarchy.k)])
    return FeatureMatrix(level_means=means, names=names, registry_tag=registry_tag(seasonal_period),
                         hierarchy_id=data.hierarchy_id, origin=origin)


def series_feature_table(data: HierSeriesSet, origin: int, seasonal_period: int = 1,
                         jobs: int = 1) -> pd.DataFrame:
    """One row per series: hierarchy_id, node_id, level, then the registry columns."""
    names = feature_names(seasonal_period)
    vectors = series_features(data, origin, seasonal_period, jobs)
    frame = pd.DataFrame([v.as_array(names) for v in vectors], columns=names)
    frame.insert(0, "level", data.hierarchy.levels)
    frame.insert(0, "node_id", list(data.hierarchy.nodes))
    frame.insert(0, "hierarchy_id", data.hierarchy_id)
    return frame
