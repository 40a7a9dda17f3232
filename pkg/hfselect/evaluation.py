"""Accuracy metrics, rolling-origin evaluation, MCB ranking test and report tables."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from sklearn.metrics import precision_recall_fscore_support

from . import diagnostics
from .datastructures import BaseModelSpec, EvalRecord, McbResult, Method
from .error_handler import DimensionError, HfSelectError, ValidationError
from .hierarchy import HierSeriesSet
from .logging_manager import get_context_logger, get_logger
from .reconcile import build_g, reconcile
from .tsmodel import forecast_hierarchy

logger = get_logger("evaluation")

METRICS = ("mase", "rmsse")

# Studentized range at infinite df divided by sqrt(2) (Nemenyi), K = 2..10.
NEMENYI_Q: Dict[float, Tuple[float, ...]] = {
    0.10: (1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920),
    0.05: (1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164),
    0.01: (2.576, 2.913, 3.113, 3.255, 3.364, 3.452, 3.526, 3.590, 3.646),
}

# MCB critical values: every Nemenyi entry times one factor so that (0.05, K=6) is 3.219.
MCB_ANCHOR = (0.05, 6, 3.219)
_MCB_SCALE = MCB_ANCHOR[2] / NEMENYI_Q[MCB_ANCHOR[0]][MCB_ANCHOR[1] - 2]
Q_TABLE: Dict[float, Tuple[float, ...]] = {
    alpha: tuple(round(v * _MCB_SCALE, 3) for v in row) for alpha, row in NEMENYI_Q.items()
}


def _inputs(actuals, forecasts, insample) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    y = np.atleast_1d(np.asarray(actuals, dtype=float))
    f = np.atleast_1d(np.asarray(forecasts, dtype=float))
    x = np.asarray(insample, dtype=float)
    if y.shape != f.shape:
        raise DimensionError(f"actuals {y.shape} and forecasts {f.shape} differ")
    if len(y) < 1:
        raise ValidationError("Horizon must be >= 1")
    if len(x) < 2:
        raise ValidationError("In-sample series needs at least 2 values")
    return y, f, x


def mase(actuals, forecasts, insample) -> float:
    """((n-1)/h) * sum|y - f| / sum_{t>=2} |y_t - y_{t-1}|. NaN when the denominator is 0."""
    y, f, x = _inputs(actuals, forecasts, insample)
    denom = np.abs(np.diff(x)).sum()
    if denom == 0.0:
        return float("nan")
    return float((len(x) - 1) / len(y) * np.abs(y - f).sum() / denom)


def rmsse(actuals, forecasts, insample) -> float:
    """sqrt(((n-1)/h) * sum (y - f)^2 / sum_{t>=2} (y_t - y_{t-1})^2). NaN when the denominator is 0."""
    y, f, x = _inputs(actuals, forecasts, insample)
    denom = (np.diff(x) ** 2).sum()
    if denom == 0.0:
        return float("nan")
    return float(np.sqrt((len(x) - 1) / len(y) * ((y - f) ** 2).sum() / denom))


def score_origin(data: HierSeriesSet, origin: int, h: int, forecasts: Dict[str, np.ndarray],
                 tags: Optional[Dict[str, str]] = None) -> List[EvalRecord]:
    """Score reconciled m x h forecasts per method against periods origin+1..origin+h."""
    hier = data.hierarchy
    if origin + h > data.n:
        raise ValidationError(f"Origin {origin} + h {h} exceeds data length {data.n}", hierarchy=data.hierarchy_id)
    actual = data.observations[:, origin:origin + h]
    records = []
    for method, Y in forecasts.items():
        tag = (tags or {}).get(method, method)
        for i, node in enumerate(hier.nodes):
            insample = data.observations[i, :origin]
            m_score = mase(actual[i], Y[i], insample)
            r_score = rmsse(actual[i], Y[i], insample)
            degenerate = not (np.isfinite(m_score) and np.isfinite(r_score))
            if degenerate:
                diagnostics.get_diagnostics().record(diagnostics.DEGENERATE_METRIC, f"{data.hierarchy_id}:{node}")
                m_score = r_score = 0.0
            records.append(EvalRecord(
                hierarchy_id=data.hierarchy_id, origin=origin, node_id=node, level=hier.level_of[node],
                method=tag, mase=m_score, rmsse=r_score, h=h, degenerate=degenerate,
            ))
    return records


def reconciled_forecasts(data: HierSeriesSet, spec: BaseModelSpec, methods: Iterable[Method],
                         origin: int, h: int) -> Dict[str, np.ndarray]:
    """Fit the base model on 1..origin and reconcile with every method. Keys are method tags."""
    base = forecast_hierarchy(data, spec, origin, h)
    out = {}
    for method in methods:
        g = build_g(method, data.hierarchy, data, origin, base.residuals)
        out[method.name] = reconcile(g, data.hierarchy, base)
    return out


def evaluate_origin(data: HierSeriesSet, spec: BaseModelSpec, methods: Iterable[Method],
                    origin: int, h: int) -> List[EvalRecord]:
    try:
        forecasts = reconciled_forecasts(data, spec, methods, origin, h)
        return score_origin(data, origin, h, forecasts)
    except HfSelectError as exc:
        raise exc.with_context(origin=origin, hierarchy=data.hierarchy_id)


def _parse_methods(methods: Iterable[Union[Method, str]]) -> List[Method]:
    parsed = [m if isinstance(m, Method) else Method.parse(m) for m in methods]
    if not parsed:
        raise ValidationError("At least one reconciliation method is required")
    return sorted(set(parsed), key=lambda m: m.code)


def rolling_eval(data: HierSeriesSet, spec: BaseModelSpec, methods: Iterable[Union[Method, str]],
                 start: int, end: int, h: int, jobs: int = 1) -> List[EvalRecord]:
    """Evaluate every method at origins start, start+h, ..., end (inclusive).

    Records come back ordered by (origin, method, node).
    """
    methods = _parse_methods(methods)
    if h < 1:
        raise ValidationError(f"Horizon must be >= 1, got {h}")
    if start < spec.min_length:
        raise ValidationError(f"start {start} is below the minimum fit length {spec.min_length}")
    if end < start:
        raise ValidationError(f"end {end} precedes start {start}")
    if end + h > data.n:
        raise ValidationError(f"end {end} + h {h} exceeds data length {data.n}", hierarchy=data.hierarchy_id)

    origins = list(range(start, end + 1, h))
    ctx = get_context_logger("evaluation")
    ctx.log_operation_start("rolling_eval", f"{data.hierarchy_id}: {len(origins)} origins")

    def run(origin: int) -> List[EvalRecord]:
        return evaluate_origin(data, spec, methods, origin, h)

    batches: List[List[EvalRecord]] = []
    with ThreadPoolExecutor(max_workers=max(1, jobs), thread_name_prefix="eval") as pool:
        for i, batch in enumerate(pool.map(run, origins), start=1):
            batches.append(batch)
            ctx.log_progress("rolling_eval", i, len(origins), data.hierarchy_id)

    records = [r for batch in batches for r in batch]
    ctx.log_operation_end("rolling_eval", True, f"{len(records)} records")
    return records


def records_to_frame(records: Sequence[EvalRecord]) -> pd.DataFrame:
    columns = list(EvalRecord.__dataclass_fields__)
    return pd.DataFrame([asdict(r) for r in records], columns=columns)


def records_from_frame(frame: pd.DataFrame) -> List[EvalRecord]:
    missing = set(EvalRecord.__dataclass_fields__) - set(frame.columns) - {"degenerate"}
    if missing:
        raise ValidationError(f"Records table is missing columns {sorted(missing)}")
    out = []
    for row in frame.to_dict("records"):
        out.append(EvalRecord(
            hierarchy_id=str(row["hierarchy_id"]), origin=int(row["origin"]), node_id=str(row["node_id"]),
            level=int(row["level"]), method=str(row["method"]), mase=float(row["mase"]),
            rmsse=float(row["rmsse"]), h=int(row["h"]), degenerate=bool(row.get("degenerate", False)),
        ))
    return out


def _scored_frame(records: Sequence[EvalRecord], metric: str) -> pd.DataFrame:
    if metric not in METRICS:
        raise ValidationError(f"Unknown metric '{metric}'. Choose from {', '.join(METRICS)}.")
    frame = records_to_frame(records)
    if frame.empty:
        raise ValidationError("No evaluation records")
    return frame


def q_value(alpha: float, k: int, nemenyi: bool = False) -> float:
    """Critical value at level alpha for k methods, from the MCB table or the plain Nemenyi one."""
    table = (NEMENYI_Q if nemenyi else Q_TABLE).get(round(float(alpha), 4))
    if table is None:
        raise ValidationError(f"No built-in critical values for alpha={alpha}; pass q_alpha explicitly")
    if not 2 <= k <= len(table) + 1:
        raise ValidationError(f"No built-in critical value for K={k}; pass q_alpha explicitly")
    return table[k - 2]


def mcb_test(records: Sequence[EvalRecord], alpha: float = 0.05, metric: str = "mase",
             q_alpha: Optional[float] = None) -> McbResult:
    """Multiple comparisons with the best over per-(hierarchy, origin, node) ranks.

    Instances with a degenerate score are dropped. Intervals are mean rank +/- r/2,
    so a method is significantly worse than the best when its mean rank exceeds the
    best mean rank by more than r.
    """
    frame = _scored_frame(records, metric)
    keys = ["hierarchy_id", "origin", "node_id"]
    wide = frame.pivot_table(index=keys, columns="method", values=metric, aggfunc="first")
    methods = list(wide.columns)
    if len(methods) < 2:
        raise ValidationError(f"MCB needs at least 2 methods, got {methods}")
    if wide.isna().any().any():
        gaps = {m: int(wide[m].isna().sum()) for m in methods if wide[m].isna().any()}
        raise ValidationError(f"Missing method coverage (instances without a score): {gaps}")

    degenerate = frame.groupby(keys)["degenerate"].any().reindex(wide.index)
    wide = wide[~degenerate.to_numpy()]
    if wide.empty:
        raise ValidationError("No non-degenerate instances to rank")

    ranks = rankdata(wide.to_numpy(), axis=1)
    mean_ranks = dict(zip(methods, ranks.mean(axis=0).tolist()))
    K, N = len(methods), ranks.shape[0]
    q = float(q_alpha) if q_alpha is not None else q_value(alpha, K)
    r = q * np.sqrt(K * (K + 1) / (12.0 * N))

    best = min(methods, key=lambda m: mean_ranks[m])
    intervals = {m: (mean_ranks[m] - r / 2.0, mean_ranks[m] + r / 2.0) for m in methods}
    worse = {m: bool(mean_ranks[m] - mean_ranks[best] > r) for m in methods}
    logger.info(f"MCB on {N} instances, K={K}: best {best}, critical difference {r:.4f}", key="mcb")
    return McbResult(methods=methods, mean_ranks=mean_ranks, critical_difference=float(r),
                     intervals=intervals, best=best, significantly_worse=worse,
                     n_instances=N, q_alpha=q, alpha=alpha)


def mcb_frame(result: McbResult) -> pd.DataFrame:
    return pd.DataFrame({
        "method": result.methods,
        "mean_rank": [result.mean_ranks[m] for m in result.methods],
        "lower": [result.intervals[m][0] for m in result.methods],
        "upper": [result.intervals[m][1] for m in result.methods],
        "significantly_worse": [result.significantly_worse[m] for m in result.methods],
    }).sort_values("mean_rank", kind="stable").reset_index(drop=True)


def classifier_metrics(predicted: Sequence[int], actual: Sequence[int],
                       labels: Sequence[int] = (0, 1, 2)) -> pd.DataFrame:
    """Per-class precision, recall and F1 (one-vs-rest).

    Classes never predicted get precision 0 and ``zero_predictions`` set.
    """
    predicted = np.asarray(predicted, dtype=int)
    actual = np.asarray(actual, dtype=int)
    if predicted.size == 0:
        raise ValidationError("No predictions to score")
    if predicted.shape != actual.shape:
        raise DimensionError(f"{len(predicted)} predictions for {len(actual)} labels")

    precision, recall, f1, support = precision_recall_fscore_support(
        actual, predicted, labels=list(labels), zero_division=0)
    n_predicted = np.array([int(np.sum(predicted == c)) for c in labels])
    zero = n_predicted == 0
    names = []
    for c in labels:
        try:
            names.append(Method.from_code(c).name)
        except ValueError:
            names.append(str(c))
    for name in np.array(names)[zero]:
        diagnostics.get_diagnostics().record(diagnostics.ZERO_PREDICTION_CLASS, name)
    return pd.DataFrame({
        "class": names, "precision": precision, "recall": recall, "f1": f1,
        "support": support, "predicted": n_predicted, "zero_predictions": zero,
    })


def level_table(records: Sequence[EvalRecord], metric: str = "mase") -> pd.DataFrame:
    """Mean score per method (rows) and level (columns) plus the mean of the level means."""
    frame = _scored_frame(records, metric)
    frame = frame[~frame["degenerate"]]
    table = frame.pivot_table(index="method", columns="level", values=metric, aggfunc="mean")
    table.columns = [f"level_{c}" for c in table.columns]
    table["average"] = table.mean(axis=1)
    return table


def accuracy_ratios(records: Sequence[EvalRecord], chf_tag: str = "CHF",
                    benchmarks: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Ratio of the CHF score to each benchmark per (hierarchy, level, metric); < 1 favours CHF."""
    frame = records_to_frame(records)
    frame = frame[~frame["degenerate"]]
    if chf_tag not in set(frame["method"]):
        raise ValidationError(f"No records tagged {chf_tag}")
    benchmarks = list(benchmarks) if benchmarks else sorted(set(frame["method"]) - {chf_tag})
    if not benchmarks:
        raise ValidationError("No benchmark records")

    long = frame.melt(id_vars=["hierarchy_id", "level", "method"], value_vars=list(METRICS),
                      var_name="metric", value_name="score")
    means = long.groupby(["hierarchy_id", "level", "metric", "method"])["score"].mean().unstack("method")

    rows = []
    diag = diagnostics.get_diagnostics()
    for bench in benchmarks:
        if bench not in means.columns:
            raise ValidationError(f"No records for benchmark {bench}")
        part = means[[chf_tag, bench]].dropna().reset_index()
        zero = part[bench] == 0.0
        for _, row in part[zero].iterrows():
            diag.record(diagnostics.ZERO_BENCHMARK, f"{row['hierarchy_id']}:{bench}")
        part = part[~zero]
        rows.append(pd.DataFrame({
            "hierarchy_id": part["hierarchy_id"], "level": part["level"], "metric": part["metric"],
            "benchmark": bench, "chf": part[chf_tag], "benchmark_score": part[bench],
            "ratio": part[chf_tag] / part[bench],
        }))
    return pd.concat(rows, ignore_index=True)


def accuracy_ratio_summary(ratios: pd.DataFrame) -> pd.DataFrame:
    """Quartiles, median and mean of the ratios per (level, metric, benchmark)."""
    grouped = ratios.groupby(["level", "metric", "benchmark"])["ratio"]
    return pd.DataFrame({
        "count": grouped.count(),
        "q1": grouped.quantile(0.25),
        "median": grouped.median(),
        "q3": grouped.quantile(0.75),
        "mean": grouped.mean(),
    }).reset_index()
