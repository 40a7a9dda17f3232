"""Command-line interface: one subcommand per pipeline stage, artifacts under --out."""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import pandas as pd

from . import __version__, diagnostics
from .chf import (
    CHF_TAG, ChfTrainingSet, GbtSelector, SelectorBundle, build_training_set, run_online, train_selector,
)
from .config import RunConfig, load_config
from .datastructures import Method
from .error_handler import DataError, ErrorHandler, ValidationError
from .evaluation import (
    accuracy_ratio_summary, accuracy_ratios, classifier_metrics, level_table, mcb_frame, mcb_test,
    records_from_frame, records_to_frame, rolling_eval,
)
from .features import feature_matrix, registry_tag, series_feature_table
from .gbt import GbtModel, feature_importance
from .hierarchy import check_coherence
from .io import (
    forecasts_from_frame, forecasts_to_frame, generate_synthetic, load_dataset, save_dataset, write_json,
    write_manifest,
)
from .logging_manager import get_logger, performance_report, reset_performance
from .reconcile import build_g, reconcile
from .tsmodel import forecast_hierarchy

logger = get_logger("cli")

DATA_FILE = "data.csv"
STRUCTURE_FILE = "structure.json"
SELECTOR_DIR = "selector"
TRAINING_FILE = "training_set.csv"
RECORDS_FILE = "records.csv"
SELECTIONS_FILE = "selections.csv"


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the validation status."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _overrides(args) -> Dict[str, Any]:
    return {
        "synth.seed": getattr(args, "seed", None),
        "model.truncate_nonneg": True if getattr(args, "truncate_nonneg", False) else None,
        "retrain": False if getattr(args, "no_retrain", False) else None,
        "metric": getattr(args, "metric", None),
        "alpha": getattr(args, "alpha", None),
        "jobs": getattr(args, "jobs", None),
    }


def _datasets(args, out: Path):
    data = Path(args.data) if args.data else out / DATA_FILE
    structure = args.structure
    if structure is None and (out / STRUCTURE_FILE).exists() and not args.data:
        structure = out / STRUCTURE_FILE
    return load_dataset(data, structure)


def _write_csv(frame: pd.DataFrame, path: Path):
    frame.to_csv(path, index=False)
    print(f"wrote {path}")


def _origin(args, config: RunConfig) -> int:
    return args.origin if args.origin is not None else config.windows.r


def cmd_synth(args, config: RunConfig) -> Dict[str, Any]:
    out = _out_dir(args)
    datasets = generate_synthetic(config.synth, jobs=config.jobs)
    save_dataset(datasets, out / DATA_FILE, out / STRUCTURE_FILE)
    print(f"wrote {len(datasets)} hierarchies to {out / DATA_FILE}")
    return {"n_hierarchies": len(datasets)}


def cmd_validate(args, config: RunConfig) -> Dict[str, Any]:
    out = _out_dir(args)
    datasets = _datasets(args, out)
    n_min = min(d.n for d in datasets)
    print(f"data ok: {len(datasets)} hierarchies, {n_min} periods minimum")
    summary: Dict[str, Any] = {"n_hierarchies": len(datasets)}
    if args.coherence:
        path = Path(args.forecasts) if args.forecasts else out / "reconciled_forecasts.csv"
        if not path.exists():
            raise DataError(f"Forecast file not found: {path}")
        blocks = forecasts_from_frame(pd.read_csv(path), datasets)
        by_id = {d.hierarchy_id: d.hierarchy for d in datasets}
        bad = []
        for (hid, origin, method), Y in blocks.items():
            report = check_coherence(by_id[hid], Y)
            if not report.ok:
                bad.append(f"{hid}@{origin}/{method}: steps {report.flagged_periods}")
        if bad:
            raise ValidationError(f"Incoherent forecasts: {bad[:10]}")
        print(f"forecasts coherent: {len(blocks)} blocks")
        summary["coherent_blocks"] = len(blocks)
    return summary


def cmd_features(args, config: RunConfig) -> Dict[str, Any]:
    out = _out_dir(args)
    datasets = _datasets(args, out)
    origin = _origin(args, config)
    tables, rows = [], []
    for data in datasets:
        tables.append(series_feature_table(data, origin, config.seasonal_period, jobs=config.jobs))
        fm = feature_matrix(data, origin, config.seasonal_period, jobs=config.jobs)
        rows.append(pd.DataFrame([fm.row], columns=fm.column_names).assign(hierarchy_id=data.hierarchy_id))
    _write_csv(pd.concat(tables, ignore_index=True), out / "features.csv")
    matrix = pd.concat(rows, ignore_index=True)
    _write_csv(matrix[["hierarchy_id"] + [c for c in matrix.columns if c != "hierarchy_id"]],
               out / "feature_matrix.csv")
    return {"origin": origin}


def cmd_forecast(args, config: RunConfig) -> Dict[str, Any]:
    out = _out_dir(args)
    datasets = _datasets(args, out)
    origin, h = _origin(args, config), config.windows.h
    blocks = []
    for data in datasets:
        base = forecast_hierarchy(data, config.model, origin, h, jobs=config.jobs)
        blocks.append((data.hierarchy_id, origin, "BASE", data.hierarchy.nodes, base.forecasts))
    _write_csv(forecasts_to_frame(blocks), out / "base_forecasts.csv")
    return {"origin": origin, "h": h}


def cmd_reconcile(args, config: RunConfig) -> Dict[str, Any]:
    out = _out_dir(args)
    datasets = _datasets(args, out)
    method = Method.parse(args.method)
    origin, h = _origin(args, config), config.windows.h
    blocks = []
    for data in datasets:
        base = forecast_hierarchy(data, config.model, origin, h, jobs=config.jobs)
        g = build_g(method, data.hierarchy, data, origin, base.residuals)
        blocks.append((data.hierarchy_id, origin, method.name, data.hierarchy.nodes,
                       reconcile(g, data.hierarchy, base)))
    _write_csv(forecasts_to_frame(blocks), out / "reconciled_forecasts.csv")
    return {"origin": origin, "h": h, "method": method.name}


def cmd_train_chf(args, config: RunConfig) -> Dict[str, Any]:
    out = _out_dir(args)
    datasets = _datasets(args, out)
    w = config.windows
    ts = build_training_set(datasets, config.model, w.p, w.r, w.h, config.seasonal_period,
                            config.level_weights, jobs=config.jobs)
    selector = train_selector(ts, config.gbt)
    SelectorBundle.create(selector, ts, config.gbt).save(out / SELECTOR_DIR)
    _write_csv(ts.to_frame(), out / TRAINING_FILE)
    print(f"training rows {ts.n_rows}, labels {ts.label_counts}, per-series wins {dict(ts.series_wins)}")
    return {"n_rows": ts.n_rows, "label_counts": ts.label_counts, "registry_tag": ts.registry_tag}


def cmd_run_chf(args, config: RunConfig) -> Dict[str, Any]:
    out = _out_dir(args)
    datasets = _datasets(args, out)
    w = config.windows
    selector_dir = Path(args.selector) if args.selector else out / SELECTOR_DIR
    registry = registry_tag(config.seasonal_period)
    bundle = SelectorBundle.load(selector_dir, registry_tag=registry)

    training_set = None
    training_path = out / TRAINING_FILE
    if training_path.exists():
        training_set = ChfTrainingSet.from_frame(pd.read_csv(training_path, dtype={"hierarchy_id": str}), registry)
    elif config.retrain:
        raise ValidationError(f"Retraining needs {training_path}; run train-chf first or pass --no-retrain")

    run = run_online(datasets, bundle.selector, config.model, w.test_from, w.test_to, w.h,
                     retrain=config.retrain, training_set=training_set, cfg=config.gbt,
                     seasonal_period=config.seasonal_period, level_weights=config.level_weights,
                     jobs=config.jobs)
    _write_csv(run.selections_frame(), out / SELECTIONS_FILE)
    _write_csv(run.forecasts_frame(), out / "chf_forecasts.csv")
    _write_csv(records_to_frame(run.records), out / RECORDS_FILE)
    _write_csv(run.classifier_metrics(), out / "classifier_metrics.csv")
    if isinstance(run.selector, GbtSelector):
        run.selector.model.save(out / "final_model.json")
    counts = run.selections_frame()["selected"].value_counts().sort_index().to_dict()
    print(f"selections {counts}, refits {run.refits}")
    return {"selections": counts, "refits": run.refits}


def _records(args, out: Path, config: RunConfig):
    path = Path(args.records) if getattr(args, "records", None) else out / RECORDS_FILE
    if path.exists():
        return records_from_frame(pd.read_csv(path, dtype={"hierarchy_id": str, "node_id": str}))
    if args.data or (out / DATA_FILE).exists():
        w = config.windows
        records = []
        for data in _datasets(args, out):
            records.extend(rolling_eval(data, config.model, list(Method), w.test_from, w.test_to, w.h,
                                        jobs=config.jobs))
        _write_csv(records_to_frame(records), path)
        return records
    raise DataError(f"No evaluation records at {path} and no data to evaluate")


def cmd_evaluate(args, config: RunConfig) -> Dict[str, Any]:
    out = _out_dir(args)
    records = _records(args, out, config)
    for metric in ("mase", "rmsse"):
        table = level_table(records, metric).reset_index()
        _write_csv(table, out / f"level_table_{metric}.csv")
        print(f"\n{metric.upper()}\n{table.to_string(index=False, float_format=lambda v: f'{v:.3f}')}")
    return {"n_records": len(records)}


def cmd_mcb(args, config: RunConfig) -> Dict[str, Any]:
    out = _out_dir(args)
    records = _records(args, out, config)
    result = mcb_test(records, alpha=config.alpha, metric=config.metric)
    _write_csv(mcb_frame(result), out / f"mcb_{config.metric}.csv")
    write_json(out / f"mcb_{config.metric}.json", result)
    print(f"best {result.best}, critical difference {result.critical_difference:.4f} over {result.n_instances} instances")
    return {"best": result.best, "critical_difference": result.critical_difference}


def cmd_report(args, config: RunConfig) -> Dict[str, Any]:
    out = _out_dir(args)
    records = _records(args, out, config)
    ratios = accuracy_ratios(records, chf_tag=CHF_TAG)
    _write_csv(ratios, out / "ratios.csv")
    _write_csv(accuracy_ratio_summary(ratios), out / "ratio_summary.csv")

    selector_dir = Path(args.selector) if args.selector else out / SELECTOR_DIR
    model_path = out / "final_model.json"
    if not model_path.exists():
        model_path = selector_dir / "model.json"
    if model_path.exists():
        ranking = feature_importance(GbtModel.load(model_path))
        _write_csv(pd.DataFrame(ranking, columns=["feature", "split_count"]), out / "importance.csv")

    selections_path = out / SELECTIONS_FILE
    if selections_path.exists():
        sel = pd.read_csv(selections_path).dropna(subset=["best"])
        if not sel.empty:
            metrics = classifier_metrics([Method[s].code for s in sel["selected"]],
                                         [Method[b].code for b in sel["best"]])
            _write_csv(metrics, out / "classifier_metrics.csv")

    merged: Dict[str, Any] = {}
    for path in sorted((out / "diagnostics").glob("*.json")):
        merged[path.stem] = json.loads(path.read_text())
    write_json(out / "report_diagnostics.json", merged)
    return {"n_ratios": len(ratios)}


COMMANDS: Dict[str, Callable[[Any, RunConfig], Dict[str, Any]]] = {
    "validate": cmd_validate,
    "synth": cmd_synth,
    "features": cmd_features,
    "forecast": cmd_forecast,
    "reconcile": cmd_reconcile,
    "train-chf": cmd_train_chf,
    "run-chf": cmd_run_chf,
    "evaluate": cmd_evaluate,
    "mcb": cmd_mcb,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run-config JSON")
    common.add_argument("--data", help="long-format data CSV (default: <out>/data.csv)")
    common.add_argument("--structure", help="structure JSON (default: <out>/structure.json)")
    common.add_argument("--out", default="run", help="run directory")
    common.add_argument("--jobs", type=int, help="worker threads (default: HFSELECT_JOBS or CPU count)")
    common.add_argument("--seed", type=int, help="synthetic data seed")
    common.add_argument("--truncate-nonneg", action="store_true", help="clip base forecasts at zero")

    parser = _ArgumentParser(prog="hfselect", description="Conditional hierarchical forecasting")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    p = sub.add_parser("validate", parents=[common], help="check data (and forecast coherence)")
    p.add_argument("--coherence", action="store_true", help="also check a forecast CSV for coherence")
    p.add_argument("--forecasts", help="forecast CSV (default: <out>/reconciled_forecasts.csv)")

    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")

    for name, text in (("features", "per-series features and level means"),
                       ("forecast", "base forecasts at one origin")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--origin", type=int, help="training periods (default: windows.r)")

    p = sub.add_parser("reconcile", parents=[common], help="coherent forecasts at one origin")
    p.add_argument("--method", required=True, choices=["bu", "td", "mint"])
    p.add_argument("--origin", type=int, help="training periods (default: windows.r)")

    sub.add_parser("train-chf", parents=[common], help="label the training window and fit the selector")

    p = sub.add_parser("run-chf", parents=[common], help="select and reconcile over the test window")
    p.add_argument("--selector", help="selector bundle directory (default: <out>/selector)")
    p.add_argument("--no-retrain", action="store_true", help="keep the off-line selector fixed")

    for name, text in (("evaluate", "per-level accuracy tables"),
                       ("mcb", "multiple comparisons with the best"),
                       ("report", "accuracy ratios, importance and diagnostics")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--records", help="evaluation records CSV (default: <out>/records.csv)")
        p.add_argument("--metric", choices=["mase", "rmsse"])
        p.add_argument("--alpha", type=float)
        if name == "report":
            p.add_argument("--selector", help="selector bundle directory (default: <out>/selector)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    diag = diagnostics.get_diagnostics()
    diag.reset()
    reset_performance()
    logger.info(f"Command {args.command}", key="command")
    try:
        config = load_config(args.config, _overrides(args))
        summary = COMMANDS[args.command](args, config)
        out = Path(args.out)
        write_manifest(out, config.to_dict(), {"command": args.command, "summary": summary,
                                               "registry_tag": registry_tag(config.seasonal_period)})
        write_json(out / "diagnostics" / f"{args.command}.json", diag.report())
        write_json(out / "performance" / f"{args.command}.json", performance_report())
        return 0
    except Exception as exc:
        info = ErrorHandler.categorize_error(exc)
        logger.error(f"{args.command} failed: {exc!r}", key="command_failed")
        print(ErrorHandler.format_error(info), file=sys.stderr)
        return ErrorHandler.exit_code(exc)
