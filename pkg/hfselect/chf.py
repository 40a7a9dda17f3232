"""Conditional hierarchical forecasting: learn which reconciliation method to use per hierarchy.

Off-line, every (hierarchy, origin) in the training window is reconciled with all
methods, scored, and labelled with the method of lowest mean MASE. A boosted-tree
classifier maps the per-level feature averages to that label. On-line, the
classifier picks one method per hierarchy and origin; with retraining on, each
origin's row is added to the training set once its actuals are known.
"""
import json
from abc import ABC, abstractmethod
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from . import diagnostics, gbt
from .datastructures import (
    LABEL_ENCODING, TIE_PRIORITY, BaseModelSpec, EvalRecord, FeatureMatrix, GbtConfig, Method,
)
from .error_handler import ModelError, ValidationError
from .evaluation import classifier_metrics, reconciled_forecasts, score_origin
from .features import MIN_LENGTH as FEATURE_MIN_LENGTH
from .features import feature_matrix
from .hierarchy import HierSeriesSet
from .io import forecasts_to_frame
from .logging_manager import get_context_logger, get_logger

logger = get_logger("chf")

CHF_TAG = "CHF"
METHODS: Tuple[Method, ...] = (Method.BU, Method.TD, Method.COM)
TIE_TOLERANCE = 1e-12
BUNDLE_VERSION = 1


def resolve_label(scores: Dict[str, float]) -> Tuple[Method, bool]:
    """Method with the lowest score; near-ties go to COM, then BU, then TD. Returns (method, tied)."""
    best = min(scores.values())
    candidates = {name for name, s in scores.items() if s - best <= TIE_TOLERANCE}
    for method in TIE_PRIORITY:
        if method.name in candidates:
            return method, len(candidates) > 1
    raise ValidationError(f"No known method among scores {sorted(scores)}")


def hierarchy_objective(records: Sequence[EvalRecord],
                        level_weights: Optional[Sequence[float]] = None) -> Optional[Dict[str, float]]:
    """Mean MASE per method over the non-degenerate series of one hierarchy at one origin.

    With level weights, the per-level means are combined with those weights instead.
    Returns None when every series is degenerate.
    """
    frame = pd.DataFrame([(r.method, r.level, r.mase) for r in records if not r.degenerate],
                         columns=["method", "level", "mase"])
    if frame.empty:
        return None
    if level_weights is None:
        scores = frame.groupby("method")["mase"].mean()
    else:
        weights = pd.Series(list(level_weights), dtype=float)
        by_level = frame.groupby(["method", "level"])["mase"].mean().unstack("level")
        w = weights.reindex(by_level.columns).fillna(0.0)
        if w.sum() <= 0:
            raise ValidationError(f"Level weights {list(level_weights)} give no weight to scored levels")
        scores = (by_level * w).sum(axis=1) / w.sum()
    return {name: float(v) for name, v in scores.items()}


def series_wins(records: Sequence[EvalRecord]) -> Counter:
    """Per-series best method counts (same tie rule as the labels)."""
    per_series: Dict[str, Dict[str, float]] = {}
    for r in records:
        if not r.degenerate:
            per_series.setdefault(r.node_id, {})[r.method] = r.mase
    wins: Counter = Counter()
    for scores in per_series.values():
        wins[resolve_label(scores)[0].name] += 1
    return wins


@dataclass
class OriginOutcome:
    """Everything resolved for one hierarchy at one origin."""

    hierarchy_id: str
    origin: int
    features: FeatureMatrix
    forecasts: Dict[str, np.ndarray]
    records: List[EvalRecord]
    scores: Optional[Dict[str, float]]
    label: Optional[Method] = None
    tied: bool = False


def resolve_origin(data: HierSeriesSet, spec: BaseModelSpec, origin: int, h: int,
                   seasonal_period: int = 1,
                   level_weights: Optional[Sequence[float]] = None) -> OriginOutcome:
    """Features on 1..origin, every method's reconciled forecasts, their scores and the label."""
    features = feature_matrix(data, origin, seasonal_period)
    forecasts = reconciled_forecasts(data, spec, METHODS, origin, h)
    records = score_origin(data, origin, h, forecasts)
    scores = hierarchy_objective(records, level_weights)
    outcome = OriginOutcome(hierarchy_id=data.hierarchy_id, origin=origin, features=features,
                            forecasts=forecasts, records=records, scores=scores)
    if scores is not None:
        outcome.label, outcome.tied = resolve_label(scores)
        if outcome.tied:
            diagnostics.get_diagnostics().record(diagnostics.LABEL_TIE, f"{data.hierarchy_id}:{origin}")
    return outcome


@dataclass(eq=False)
class ChfTrainingSet:
    """One labelled row per (hierarchy, origin)."""

    rows: np.ndarray
    labels: np.ndarray
    hierarchy_ids: List[str]
    origins: List[int]
    column_names: List[str]
    registry_tag: str
    scores: List[Dict[str, float]] = field(default_factory=list)
    series_wins: Counter = field(default_factory=Counter)
    ties: int = 0
    skipped: List[Tuple[str, int]] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return len(self.labels)

    @property
    def label_counts(self) -> Dict[str, int]:
        counts = np.bincount(self.labels.astype(int), minlength=len(METHODS)) if self.n_rows else np.zeros(3, int)
        return {Method.from_code(c).name: int(counts[c]) for c in range(len(METHODS))}

    @property
    def last_origin(self) -> int:
        return max(self.origins) if self.origins else 0

    def append(self, outcome: OriginOutcome):
        """Add a resolved origin; outcomes without a label are recorded as skipped."""
        if outcome.label is None:
            self.skipped.append((outcome.hierarchy_id, outcome.origin))
            return
        if outcome.features.registry_tag != self.registry_tag:
            raise ModelError(f"Feature registry {outcome.features.registry_tag} does not match "
                             f"training registry {self.registry_tag}")
        row = outcome.features.row[None, :]
        self.rows = row if self.rows.size == 0 else np.vstack([self.rows, row])
        self.labels = np.append(self.labels, outcome.label.code).astype(int)
        self.hierarchy_ids.append(outcome.hierarchy_id)
        self.origins.append(outcome.origin)
        self.scores.append(dict(outcome.scores))
        self.series_wins.update(series_wins(outcome.records))
        self.ties += int(outcome.tied)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows, columns=self.column_names)
        frame.insert(0, "label", [Method.from_code(c).name for c in self.labels])
        frame.insert(0, "origin", self.origins)
        frame.insert(0, "hierarchy_id", self.hierarchy_ids)
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, registry_tag: str) -> "ChfTrainingSet":
        """Inverse of to_frame; per-origin scores and win counts are not carried over."""
        missing = {"hierarchy_id", "origin", "label"} - set(frame.columns)
        if missing:
            raise ValidationError(f"Training table is missing columns {sorted(missing)}")
        columns = [c for c in frame.columns if c not in ("hierarchy_id", "origin", "label")]
        try:
            labels = np.array([Method[name].code for name in frame["label"]], dtype=int)
        except KeyError as exc:
            raise ValidationError(f"Unknown label {exc} in training table")
        return cls(rows=frame[columns].to_numpy(dtype=float), labels=labels,
                   hierarchy_ids=frame["hierarchy_id"].astype(str).tolist(),
                   origins=frame["origin"].astype(int).tolist(), column_names=columns,
                   registry_tag=registry_tag)

    @classmethod
    def empty(cls, column_names: List[str], registry_tag: str) -> "ChfTrainingSet":
        return cls(rows=np.empty((0, len(column_names))), labels=np.empty(0, dtype=int),
                   hierarchy_ids=[], origins=[], column_names=list(column_names), registry_tag=registry_tag)


def _check_shared_shape(datasets: Sequence[HierSeriesSet]):
    if not datasets:
        raise ValidationError("No hierarchies supplied")
    levels = {d.hierarchy.k for d in datasets}
    if len(levels) > 1:
        raise ValidationError(f"All hierarchies must share the number of levels, got {sorted(levels)}")


def build_training_set(datasets: Sequence[HierSeriesSet], spec: BaseModelSpec, p: int, r: int, h: int,
                       seasonal_period: int = 1, level_weights: Optional[Sequence[float]] = None,
                       jobs: int = 1) -> ChfTrainingSet:
    """Label every (hierarchy, origin) with origins p, p+h, ... whose horizon ends by r.

    Args:
        datasets: hierarchies sharing a level structure
        spec: base model for all series
        p: first training origin
        r: last period of the training window
        h: forecast horizon and origin step
        seasonal_period: seasonal period for the features
        level_weights: optional per-level weights for the label objective
        jobs: worker threads across (hierarchy, origin)

    Returns:
        ChfTrainingSet with rows in (hierarchy, origin) order.
    """
    _check_shared_shape(datasets)
    if h < 1:
        raise ValidationError(f"Horizon must be >= 1, got {h}")
    if p < max(spec.min_length, FEATURE_MIN_LENGTH):
        raise ValidationError(f"p={p} is below the minimum fit length {max(spec.min_length, FEATURE_MIN_LENGTH)}")
    origins = list(range(p, r - h + 1, h))
    if not origins:
        raise ValidationError(f"Window p={p}, r={r}, h={h} contains no origins")
    for data in datasets:
        if r > data.n:
            raise ValidationError(f"r={r} exceeds data length {data.n}", hierarchy=data.hierarchy_id)

    ctx = get_context_logger("chf")
    tasks = [(data, t) for data in datasets for t in origins]
    ctx.log_operation_start("build_training_set", f"{len(datasets)} hierarchies x {len(origins)} origins")

    def run(task) -> OriginOutcome:
        data, t = task
        return resolve_origin(data, spec, t, h, seasonal_period, level_weights)

    outcomes: List[OriginOutcome] = []
    with ThreadPoolExecutor(max_workers=max(1, jobs), thread_name_prefix="chf") as pool:
        for i, outcome in enumerate(pool.map(run, tasks), start=1):
            outcomes.append(outcome)
            ctx.log_progress("build_training_set", i, len(tasks), f"{outcome.hierarchy_id}@{outcome.origin}")

    first = outcomes[0].features
    ts = ChfTrainingSet.empty(first.column_names, first.registry_tag)
    for outcome in outcomes:
        ts.append(outcome)
    for hid, origin in ts.skipped:
        diagnostics.get_diagnostics().record(diagnostics.SKIPPED_HIERARCHY, f"{hid}:{origin}")
    if ts.skipped:
        logger.warning(f"{len(ts.skipped)} hierarchy-origins skipped (all series degenerate)", key="skipped")

    ctx.log_operation_end("build_training_set", True, f"{ts.n_rows} rows, labels {ts.label_counts}")
    return ts


class Selector(ABC):
    """Chooses a reconciliation method for one hierarchy at one origin."""

    kind = "selector"

    @abstractmethod
    def select(self, features: FeatureMatrix, context: Optional[Dict[str, Any]] = None) -> Method:
        ...


class GbtSelector(Selector):
    kind = "gbt"

    def __init__(self, model: gbt.GbtModel, registry_tag: str):
        self.model = model
        self.registry_tag = registry_tag

    def probabilities(self, features: FeatureMatrix) -> np.ndarray:
        if features.registry_tag != self.registry_tag:
            raise ModelError(f"Feature registry {features.registry_tag} does not match the selector's "
                             f"{self.registry_tag}; retrain the selector")
        return self.model.predict_proba(features.row)

    def select(self, features: FeatureMatrix, context: Optional[Dict[str, Any]] = None) -> Method:
        return Method.from_code(int(np.argmax(self.probabilities(features))))


class ConstantSelector(Selector):
    kind = "constant"

    def __init__(self, method: Method, registry_tag: Optional[str] = None):
        self.method = method
        self.registry_tag = registry_tag

    def select(self, features: FeatureMatrix, context: Optional[Dict[str, Any]] = None) -> Method:
        return self.method


class OracleSelector(Selector):
    """Picks the resolved best method; needs the realised scores in the context."""

    kind = "oracle"

    def select(self, features: FeatureMatrix, context: Optional[Dict[str, Any]] = None) -> Method:
        scores = (context or {}).get("scores")
        if scores is None:
            raise ValidationError("Oracle selection needs realised scores")
        return resolve_label(scores)[0]


def train_selector(ts: ChfTrainingSet, cfg: Optional[GbtConfig] = None) -> Selector:
    """Fit the classifier on the training set; a single-class set yields a ConstantSelector."""
    cfg = cfg or GbtConfig()
    if ts.n_rows == 0:
        raise ValidationError("Training set is empty")
    present = np.unique(ts.labels)
    if len(present) < 2:
        method = Method.from_code(int(present[0]))
        diagnostics.get_diagnostics().record(diagnostics.CONSTANT_SELECTOR, method.name)
        logger.warning(f"All training labels are {method.name}; using a constant selector", key="constant")
        return ConstantSelector(method, ts.registry_tag)
    model = gbt.train(ts.rows, ts.labels, cfg, feature_names=ts.column_names)
    return GbtSelector(model, ts.registry_tag)


@dataclass
class SelectorBundle:
    """A selector on disk: ``model.json`` (boosted trees only) and ``manifest.json``."""

    selector: Selector
    manifest: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def create(cls, selector: Selector, ts: Optional[ChfTrainingSet] = None,
               cfg: Optional[GbtConfig] = None) -> "SelectorBundle":
        manifest = {
            "version": BUNDLE_VERSION,
            "kind": selector.kind,
            "registry_tag": getattr(selector, "registry_tag", None),
            "label_encoding": dict(LABEL_ENCODING),
            "gbt_config": asdict(cfg) if cfg else None,
        }
        if isinstance(selector, ConstantSelector):
            manifest["constant_method"] = selector.method.name
        if ts is not None:
            manifest["label_counts"] = ts.label_counts
            manifest["series_wins"] = dict(sorted(ts.series_wins.items()))
            manifest["n_rows"] = ts.n_rows
            manifest["label_ties"] = ts.ties
        return cls(selector=selector, manifest=manifest)

    def save(self, directory: Union[str, Path]):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        if isinstance(self.selector, GbtSelector):
            self.selector.model.save(directory / "model.json")
        (directory / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: Union[str, Path], registry_tag: Optional[str] = None) -> "SelectorBundle":
        """Load a bundle; with registry_tag given, a mismatching bundle is rejected."""
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise ModelError(f"No selector manifest in {directory}")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("version") != BUNDLE_VERSION:
            raise ModelError(f"Unsupported selector bundle version {manifest.get('version')}")
        if manifest.get("label_encoding") != LABEL_ENCODING:
            raise ModelError(f"Label encoding {manifest.get('label_encoding')} differs from {LABEL_ENCODING}")
        tag = manifest.get("registry_tag")
        if registry_tag is not None and tag is not None and tag != registry_tag:
            raise ModelError(f"Selector was trained on registry {tag}, data uses {registry_tag}")

        kind = manifest.get("kind")
        if kind == "gbt":
            selector: Selector = GbtSelector(gbt.GbtModel.load(directory / "model.json"), tag)
        elif kind == "constant":
            selector = ConstantSelector(Method[manifest["constant_method"]], tag)
        else:
            raise ModelError(f"Cannot load selector of kind {kind!r}")
        return cls(selector=selector, manifest=manifest)


@dataclass
class ChfRun:
    """On-line results: selections, selected forecasts and all scored records."""

    selector: Selector
    selections: List[Dict[str, Any]] = field(default_factory=list)
    forecasts: Dict[Tuple[str, int], np.ndarray] = field(default_factory=dict)
    records: List[EvalRecord] = field(default_factory=list)
    training_set: Optional[ChfTrainingSet] = None
    refits: int = 0
    nodes: Dict[str, Tuple[str, ...]] = field(default_factory=dict)

    def selections_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.selections, columns=["hierarchy_id", "origin", "selected", "best", "tied"])

    def forecasts_frame(self) -> pd.DataFrame:
        selected = {(s["hierarchy_id"], s["origin"]): s["selected"] for s in self.selections}
        return forecasts_to_frame(
            (hid, origin, selected[(hid, origin)], self.nodes[hid], Y)
            for (hid, origin), Y in sorted(self.forecasts.items())
        )

    def classifier_metrics(self) -> pd.DataFrame:
        resolved = [s for s in self.selections if s["best"] is not None]
        if not resolved:
            raise ValidationError("No resolved selections to score")
        predicted = [Method[s["selected"]].code for s in resolved]
        actual = [Method[s["best"]].code for s in resolved]
        return classifier_metrics(predicted, actual)


def run_online(datasets: Sequence[HierSeriesSet], selector: Selector, spec: BaseModelSpec,
               start: int, end: int, h: int, retrain: bool = True,
               training_set: Optional[ChfTrainingSet] = None, cfg: Optional[GbtConfig] = None,
               seasonal_period: int = 1, level_weights: Optional[Sequence[float]] = None,
               jobs: int = 1) -> ChfRun:
    """Select and reconcile at origins start, start+h, ..., end (inclusive).

    Every method is reconciled at each origin so that benchmarks and labels are
    available; the selected method's records are repeated under the CHF tag.

    Raises:
        ValidationError: for windows that overlap the training data or run past the data.
    """
    _check_shared_shape(datasets)
    if h < 1 or end < start:
        raise ValidationError(f"Invalid on-line window start={start}, end={end}, h={h}")
    if retrain and training_set is None:
        raise ValidationError("Retraining needs the off-line training set")
    if training_set is not None and start < training_set.last_origin + h:
        raise ValidationError(f"On-line start {start} overlaps the training window "
                              f"(last training origin {training_set.last_origin}, h={h})")
    for data in datasets:
        if end + h > data.n:
            raise ValidationError(f"end {end} + h {h} exceeds data length {data.n}", hierarchy=data.hierarchy_id)

    ts = None
    if training_set is not None:
        ts = ChfTrainingSet.empty(training_set.column_names, training_set.registry_tag)
        ts.rows, ts.labels = training_set.rows.copy(), training_set.labels.copy()
        ts.hierarchy_ids, ts.origins = list(training_set.hierarchy_ids), list(training_set.origins)
        ts.scores, ts.series_wins = list(training_set.scores), Counter(training_set.series_wins)
        ts.ties, ts.skipped = training_set.ties, list(training_set.skipped)

    run = ChfRun(selector=selector, training_set=ts, nodes={d.hierarchy_id: d.hierarchy.nodes for d in datasets})
    ctx = get_context_logger("chf")
    origins = list(range(start, end + 1, h))
    ctx.log_operation_start("run_online", f"{len(datasets)} hierarchies x {len(origins)} origins, retrain={retrain}")

    def resolve(data: HierSeriesSet, t: int) -> OriginOutcome:
        return resolve_origin(data, spec, t, h, seasonal_period, level_weights)

    pending: List[OriginOutcome] = []
    for t in origins:
        if retrain and pending:
            for outcome in pending:
                ts.append(outcome)
            run.selector = train_selector(ts, cfg)
            run.refits += 1
            logger.info(f"Selector refit with {ts.n_rows} rows before origin {t}", key="refit")

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs, thread_name_prefix="online") as pool:
                outcomes = list(pool.map(lambda d: resolve(d, t), datasets))
        else:
            outcomes = [resolve(d, t) for d in datasets]

        for outcome in outcomes:
            chosen = run.selector.select(outcome.features, {"scores": outcome.scores})
            run.selections.append({
                "hierarchy_id": outcome.hierarchy_id,
                "origin": t,
                "selected": chosen.name,
                "best": outcome.label.name if outcome.label is not None else None,
                "tied": outcome.tied,
            })
            run.forecasts[(outcome.hierarchy_id, t)] = outcome.forecasts[chosen.name]
            run.records.extend(outcome.records)
            run.records.extend(replace(r, method=CHF_TAG) for r in outcome.records if r.method == chosen.name)
        pending = outcomes
        ctx.log_progress("run_online", len(run.selections) // len(datasets), len(origins), f"origin {t}")

    ctx.log_operation_end("run_online", True, f"{len(run.selections)} selections, {run.refits} refits")
    return run
