"""MCP tool server exposing reconciliation, coherence, feature and scoring operations."""
import json
import os
from typing import Dict, List, Optional

import numpy as np
from fastmcp import FastMCP

from .datastructures import Method
from .error_handler import ErrorHandler
from .evaluation import mase, q_value, rmsse
from .features import compute_features
from .hierarchy import HierSeriesSet, build_hierarchy, check_coherence
from .logging_manager import get_logger
from .reconcile import build_g, reconcile

mcp = FastMCP("hfselect")
logger = get_logger("server")


def _error(exc: Exception) -> str:
    info = ErrorHandler.categorize_error(exc)
    return ErrorHandler.format_error(info, include_troubleshooting=False)


def reconcile_forecasts(
    edges: List[List[str]],
    base_forecasts: List[List[float]],
    method: str = "bu",
    history: Optional[List[List[float]]] = None,
    residuals: Optional[List[List[float]]] = None,
) -> str:
    """Reconcile base forecasts so that every parent equals the sum of its children.

    Rows of base_forecasts (and history, residuals) follow the node order returned
    by check_coherence: internal nodes level by level, then leaves.

    Args:
        edges: [parent, child] pairs of a single rooted tree
        base_forecasts: m x h base forecasts
        method: bu, td or mint
        history: m x n coherent observations (needed for td)
        residuals: m x r one-step in-sample residuals (needed for mint)
    """
    log = logger.getChild("tool_reconcile")
    try:
        hier = build_hierarchy(edges)
        chosen = Method.parse(method)
        data = None
        if history is not None:
            data = HierSeriesSet(hierarchy=hier, observations=np.asarray(history, dtype=float))
        if chosen == Method.TD and data is None:
            return "Error: top-down reconciliation needs history"
        origin = data.n if data is not None else 0
        g = build_g(chosen, hier, data, origin, None if residuals is None else np.asarray(residuals, dtype=float))
        Y = reconcile(g, hier, base_forecasts)
    except Exception as exc:
        log.error(f"reconcile_forecasts failed: {exc}")
        return _error(exc)
    log.info(f"Reconciled {hier.m} series with {chosen.name}")
    return json.dumps({"nodes": list(hier.nodes), "method": chosen.name, "forecasts": Y.tolist(),
                       "metadata": g.metadata, "warnings": g.warnings})


def check_coherence_tool(edges: List[List[str]], values: List[List[float]], tol: float = 1e-8) -> str:
    """Check whether an m x n matrix is coherent with the hierarchy.

    Args:
        edges: [parent, child] pairs
        values: m x n values in hierarchy node order
        tol: relative tolerance per period
    """
    try:
        hier = build_hierarchy(edges)
        report = check_coherence(hier, values, tol)
    except Exception as exc:
        return _error(exc)
    return json.dumps({"nodes": list(hier.nodes), "coherent": report.ok,
                       "flagged_periods": report.flagged_periods, "max_violation": report.max_violation})


def compute_series_features(series: List[float], seasonal_period: int = 1) -> str:
    """Compute the time-series feature registry for one series."""
    try:
        fv = compute_features(np.asarray(series, dtype=float), seasonal_period)
    except Exception as exc:
        return _error(exc)
    return json.dumps({"registry_tag": fv.registry_tag, "features": fv.values, "nonfinite": fv.nonfinite})


def mcb_critical_difference(n_methods: int, n_instances: int, alpha: float = 0.05,
                            q_alpha: Optional[float] = None) -> str:
    """Critical difference of mean ranks for multiple comparisons with the best."""
    try:
        q = q_alpha if q_alpha is not None else q_value(alpha, n_methods)
        r = q * np.sqrt(n_methods * (n_methods + 1) / (12.0 * n_instances))
    except Exception as exc:
        return _error(exc)
    return json.dumps({"q_alpha": q, "critical_difference": float(r)})


def score_forecast(actuals: List[float], forecasts: List[float], insample: List[float]) -> str:
    """MASE and RMSSE of a forecast against actuals, scaled by the in-sample naive errors."""
    try:
        scores: Dict[str, Optional[float]] = {
            "mase": mase(actuals, forecasts, insample),
            "rmsse": rmsse(actuals, forecasts, insample),
        }
    except Exception as exc:
        return _error(exc)
    degenerate = not all(np.isfinite(v) for v in scores.values())
    if degenerate:
        scores = {k: None for k in scores}
    return json.dumps({**scores, "degenerate": degenerate})


for _tool in (reconcile_forecasts, compute_series_features, mcb_critical_difference, score_forecast):
    mcp.tool()(_tool)
mcp.tool(name="check_coherence")(check_coherence_tool)


def main():
    """Run the tool server over SSE when HFSELECT_SSE_PORT is set, else stdio."""
    sse_port = os.getenv("HFSELECT_SSE_PORT")
    if sse_port:
        mcp.run(transport="sse", host="0.0.0.0", port=int(sse_port))
    else:
        mcp.run()
