"""Forecast reconciliation: G matrices for BU, TD and MinT-shrink, and Y~ = S G Y^."""
from typing import Optional, Tuple

import numpy as np
from scipy import linalg

from . import diagnostics
from .datastructures import BaseForecasts, GMatrix, Method, ShrinkageEstimate
from .error_handler import DimensionError, ValidationError
from .hierarchy import HierSeriesSet, Hierarchy
from .logging_manager import get_logger

logger = get_logger("reconcile")

# Condition number above which W is treated as numerically singular
CONDITION_LIMIT = 1e10
# Eigenvalue cutoff (relative to the largest) for the pseudo-inverse path
PINV_CUTOFF = 1e-10
JITTER = 1e-8
VARIANCE_FLOOR = 1e-12


def g_bottom_up(h: Hierarchy) -> GMatrix:
    """G = [0 | I_{m_k}]."""
    G = np.zeros((h.m_k, h.m))
    G[:, h.m - h.m_k:] = np.eye(h.m_k)
    return GMatrix(method=Method.BU, G=G)


def td_proportions(h: Hierarchy, data: HierSeriesSet, origin: int) -> Tuple[np.ndarray, bool]:
    """Proportions of historical averages over periods 1..origin.

    Returns (p, fell_back) where fell_back marks the uniform fallback for a zero total.
    """
    if origin < 1 or origin > data.n:
        raise ValidationError(f"Origin {origin} outside [1, {data.n}]", hierarchy=data.hierarchy_id)
    window = data.window(origin)
    total = window[0].sum()
    if total == 0.0:
        return np.full(h.m_k, 1.0 / h.m_k), True
    return window[h.m - h.m_k:].sum(axis=1) / total, False


def g_top_down(h: Hierarchy, data: HierSeriesSet, origin: int) -> GMatrix:
    """G with first column p_j (historical-average proportions) and zeros elsewhere."""
    p, fell_back = td_proportions(h, data, origin)
    G = np.zeros((h.m_k, h.m))
    G[:, 0] = p
    warnings = []
    if fell_back:
        warnings.append(diagnostics.TD_UNIFORM_FALLBACK)
        diagnostics.get_diagnostics().record(diagnostics.TD_UNIFORM_FALLBACK, data.hierarchy_id)
        logger.warning(f"Zero historical total for {data.hierarchy_id} at origin {origin}; "
                       f"uniform proportions used", key="td_fallback")
    return GMatrix(method=Method.TD, G=G, metadata={"proportions": p.tolist(), "origin": origin},
                   warnings=warnings)


def shrinkage_estimate(residuals: np.ndarray, lambda_override: Optional[float] = None) -> ShrinkageEstimate:
    """Shrink the one-step residual covariance towards its diagonal.

    W1 is the residual cross-product over r (residuals are taken as zero mean).
    lambda = sum_{i!=j} Var(r_ij) / sum_{i!=j} r_ij^2 on the correlation scale, with
    Var(r_ij) = sum_t (w_tij - mean_t w_tij)^2 / (r (r - 1)) for the standardized
    cross-products w_tij, clamped to [0, 1].
    """
    E = np.asarray(residuals, dtype=float)
    if E.ndim != 2 or E.shape[1] < 2:
        raise ValidationError(f"Need an m x r residual matrix with r >= 2, got shape {E.shape}")
    m, r = E.shape
    X = E.T  # r x m

    W1 = X.T @ X / r
    diag = np.diag(W1).copy()
    mean_diag = diag.mean() if diag.mean() > 0 else 1.0
    floor = VARIANCE_FLOOR * mean_diag
    floored = [int(i) for i in np.flatnonzero(diag < floor)]
    if floored:
        diag[floored] = floor
        W1[floored, floored] = floor

    if lambda_override is not None:
        lam = float(np.clip(lambda_override, 0.0, 1.0))
    else:
        sd = np.sqrt(diag)
        Xs = X / sd
        corr = W1 / np.outer(sd, sd)
        np.fill_diagonal(corr, 1.0)
        var_r = (Xs.T ** 2 @ Xs ** 2 - (Xs.T @ Xs) ** 2 / r) / (r * (r - 1))
        np.fill_diagonal(var_r, 0.0)
        sq = corr ** 2
        np.fill_diagonal(sq, 0.0)
        denom = sq.sum()
        lam = 1.0 if denom <= 0.0 else float(np.clip(var_r.sum() / denom, 0.0, 1.0))

    W_diag = np.diag(diag)
    W = lam * W_diag + (1.0 - lam) * W1
    W = (W + W.T) / 2.0
    return ShrinkageEstimate(W1=W1, W1_diag=diag, lam=lam, W_shrunk=W, floored=floored)


def g_from_weights(S: np.ndarray, W: np.ndarray) -> Tuple[np.ndarray, str]:
    """G = (S' W^-1 S)^-1 S' W^-1.

    Uses symmetric positive-definite solves when W is well conditioned, otherwise an
    eigendecomposition pseudo-inverse. Returns (G, path).
    """
    if np.linalg.cond(W) < CONDITION_LIMIT:
        WinvS = linalg.solve(W, S, assume_a="pos")
        A = S.T @ WinvS
        G = linalg.solve(A, WinvS.T, assume_a="pos")
        return G, "solve"

    eigval, eigvec = np.linalg.eigh(W)
    keep = eigval > PINV_CUTOFF * eigval.max()
    W_pinv = (eigvec[:, keep] / eigval[keep]) @ eigvec[:, keep].T
    A = S.T @ W_pinv @ S
    G = np.linalg.pinv(A) @ S.T @ W_pinv
    return G, "pinv"


def g_mint_shrink(h: Hierarchy, residuals: np.ndarray, lambda_override: Optional[float] = None) -> GMatrix:
    """Trace-minimizing G with the shrinkage covariance estimate of the one-step errors."""
    residuals = np.asarray(residuals, dtype=float)
    if residuals.shape[0] != h.m:
        raise DimensionError(f"Residuals have {residuals.shape[0]} rows, hierarchy has {h.m} series")

    diag = diagnostics.get_diagnostics()
    est = shrinkage_estimate(residuals, lambda_override)
    warnings = []
    if est.floored:
        warnings.append(diagnostics.MINT_VARIANCE_FLOOR)
        diag.record(diagnostics.MINT_VARIANCE_FLOOR, count=len(est.floored))

    W = est.W_shrunk
    if np.linalg.cond(W) >= CONDITION_LIMIT:
        W = W + JITTER * np.mean(np.diag(W)) * np.eye(h.m)
        warnings.append(diagnostics.MINT_JITTER)
        diag.record(diagnostics.MINT_JITTER)
        logger.warning("Shrunk covariance is numerically singular; jitter added", key="mint_jitter")

    G, path = g_from_weights(h.summing, W)
    if path == "pinv":
        warnings.append(diagnostics.MINT_PINV)
        diag.record(diagnostics.MINT_PINV)
        logger.warning("Falling back to pseudo-inverse for W", key="mint_pinv")

    return GMatrix(method=Method.COM, G=G, metadata={"lambda": est.lam, "solve_path": path},
                   warnings=warnings)


def build_g(method: Method, h: Hierarchy, data: HierSeriesSet, origin: int,
            residuals: Optional[np.ndarray] = None) -> GMatrix:
    """Dispatch to the G builder for a method."""
    if method == Method.BU:
        return g_bottom_up(h)
    if method == Method.TD:
        return g_top_down(h, data, origin)
    if residuals is None:
        raise ValidationError("MinT reconciliation needs in-sample residuals")
    return g_mint_shrink(h, residuals)


def reconcile(g: GMatrix, h: Hierarchy, base) -> np.ndarray:
    """Y~ = S G Y^ for an m x h matrix (or BaseForecasts)."""
    Y = base.forecasts if isinstance(base, BaseForecasts) else np.asarray(base, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if g.G.shape != (h.m_k, h.m) or Y.shape[0] != h.m:
        raise DimensionError(f"G {g.G.shape} and base {Y.shape} do not match hierarchy (m={h.m}, m_k={h.m_k})")
    return h.summing @ (g.G @ Y)


def unbiasedness(g: GMatrix, h: Hierarchy, atol: float = 1e-6) -> Tuple[bool, bool]:
    """Returns (S G S = S holds, G S = I holds) within atol."""
    S = h.summing
    sgs = bool(np.allclose(S @ g.G @ S, S, rtol=0.0, atol=atol))
    gs = bool(np.allclose(g.G @ S, np.eye(h.m_k), rtol=0.0, atol=atol))
    return sgs, gs
