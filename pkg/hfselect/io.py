"""Dataset files, run manifests and the synthetic retail-hierarchy generator.

Data CSV (long format, one row per node and period)::

    hierarchy_id,node_id,period,value[,price][,parent_id]

Structure JSON, either shared by every hierarchy or keyed per hierarchy::

    {"edges": [["total", "A"], ["A", "A1"], ...]}
    {"hierarchies": {"h000": {"edges": [...]}, ...}}

Without a structure file the CSV must carry ``parent_id`` (empty for the root).
"""
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, is_dataclass
from datetime import datetime, timezone
from enum import Enum
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .datastructures import SynthConfig
from .error_handler import ConfigError, DataError
from .hierarchy import HierSeriesSet, Hierarchy, aggregate_bottom, build_hierarchy, hierarchy_from_dict
from .logging_manager import get_context_logger, get_logger

logger = get_logger("io")

REQUIRED_COLUMNS = ("hierarchy_id", "node_id", "period", "value")
VERSIONED_PACKAGES = ("hfselect", "numpy", "scipy", "pandas", "statsmodels", "scikit-learn")

PathLike = Union[str, Path]


def _read_structure(structure_path: Optional[PathLike]) -> Optional[Dict[str, Any]]:
    if structure_path is None:
        return None
    path = Path(structure_path)
    if not path.exists():
        raise DataError(f"Structure file not found: {path}")
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"Structure file is not valid JSON: {exc}", path=str(path))
    if "edges" not in spec and "hierarchies" not in spec:
        raise DataError("Structure JSON needs 'edges' or 'hierarchies'", path=str(path))
    return spec


def _hierarchy_for(hid: str, structure: Optional[Dict[str, Any]], rows: pd.DataFrame) -> Hierarchy:
    if structure is not None:
        if "hierarchies" in structure:
            if hid not in structure["hierarchies"]:
                raise DataError(f"No structure for hierarchy '{hid}'")
            return hierarchy_from_dict(structure["hierarchies"][hid])
        return hierarchy_from_dict(structure)
    if "parent_id" not in rows.columns:
        raise DataError("Without a structure file the data CSV needs a parent_id column", hierarchy=hid)
    links = rows[["parent_id", "node_id"]].dropna().drop_duplicates()
    links = links[links["parent_id"].astype(str) != ""]
    if links["node_id"].duplicated().any():
        dup = links.loc[links["node_id"].duplicated(), "node_id"].iloc[0]
        raise DataError(f"Node '{dup}' has more than one parent_id", hierarchy=hid)
    return build_hierarchy(links.astype(str).itertuples(index=False, name=None))


def _pivot(rows: pd.DataFrame, column: str, periods: List[Any]) -> pd.DataFrame:
    return rows.pivot(index="node_id", columns="period", values=column).reindex(columns=periods)


def _build_set(hid: str, rows: pd.DataFrame, hier: Hierarchy) -> HierSeriesSet:
    unknown = sorted(set(rows["node_id"]) - set(hier.nodes))
    if unknown:
        raise DataError(f"Unknown nodes {unknown[:10]}", hierarchy=hid)
    if rows.duplicated(["node_id", "period"]).any():
        raise DataError("Duplicate (node_id, period) rows", hierarchy=hid)

    periods = sorted(rows["period"].unique().tolist())
    values = _pivot(rows, "value", periods)
    leaves = list(hier.bottom_nodes)
    missing_leaves = [n for n in leaves if n not in values.index]
    if missing_leaves:
        raise DataError(f"Leaf series missing: {missing_leaves[:10]}", hierarchy=hid)
    present = [n for n in hier.nodes if n in values.index]
    ragged = values.loc[present].isna().any(axis=1)
    if ragged.any():
        raise DataError(f"Ragged periods for nodes {ragged[ragged].index.tolist()[:10]}", hierarchy=hid)

    bottom = values.loc[leaves].to_numpy(dtype=float)
    observations = aggregate_bottom(hier, bottom)
    synthesized = [n for n in hier.nodes if n not in values.index]
    if synthesized:
        logger.info(f"{hid}: synthesized {len(synthesized)} upper-level series", key="synthesized")
    for node in present:
        observations[hier.index_of(node)] = values.loc[node].to_numpy(dtype=float)

    regressors = None
    if "price" in rows.columns and rows["price"].notna().any():
        prices = _pivot(rows, "price", periods)
        leaf_prices = prices.reindex(leaves)
        if leaf_prices.isna().any().any():
            raise DataError("Leaf prices are incomplete", hierarchy=hid)
        regressors = _upper_prices(hier, leaf_prices.to_numpy(dtype=float))
        for node in present:
            row = prices.loc[node]
            if row.notna().all():
                regressors[hier.index_of(node)] = row.to_numpy(dtype=float)

    return HierSeriesSet(hierarchy=hier, observations=observations, regressors=regressors,
                         period_labels=tuple(periods), hierarchy_id=hid)


def _upper_prices(hier: Hierarchy, leaf_prices: np.ndarray) -> np.ndarray:
    """Each node's price is the mean of the prices of the leaves below it."""
    S = hier.summing
    return (S @ leaf_prices) / S.sum(axis=1, keepdims=True)


def load_dataset(data_path: PathLike, structure_path: Optional[PathLike] = None) -> List[HierSeriesSet]:
    """Load every hierarchy in a long-format CSV.

    Raises:
        DataError: missing columns, unknown nodes, ragged periods or incoherent upper rows.
    """
    path = Path(data_path)
    if not path.exists():
        raise DataError(f"Data file not found: {path}")
    frame = pd.read_csv(path)
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"Data CSV is missing column(s) {missing}", path=str(path))
    for column in ("hierarchy_id", "node_id"):
        frame[column] = frame[column].astype(str)
    if "parent_id" in frame.columns:
        frame["parent_id"] = frame["parent_id"].where(frame["parent_id"].isna(), frame["parent_id"].astype(str))
    structure = _read_structure(structure_path)

    ctx = get_context_logger("io")
    ctx.log_operation_start("load_dataset", str(path))
    datasets = []
    for hid, rows in frame.groupby("hierarchy_id", sort=True):
        hier = _hierarchy_for(str(hid), structure, rows)
        datasets.append(_build_set(str(hid), rows, hier))
    ctx.log_operation_end("load_dataset", True, f"{len(datasets)} hierarchies")
    return datasets


def dataset_frame(datasets: Sequence[HierSeriesSet]) -> pd.DataFrame:
    parts = []
    for data in datasets:
        labels = list(data.period_labels) if data.period_labels is not None else list(range(1, data.n + 1))
        nodes = np.repeat(np.array(data.hierarchy.nodes, dtype=object), data.n)
        part = pd.DataFrame({
            "hierarchy_id": data.hierarchy_id,
            "node_id": nodes,
            "period": np.tile(labels, data.hierarchy.m),
            "value": data.observations.reshape(-1),
        })
        if data.regressors is not None:
            part["price"] = data.regressors.reshape(-1)
        parts.append(part)
    return pd.concat(parts, ignore_index=True)


def save_dataset(datasets: Sequence[HierSeriesSet], data_path: PathLike, structure_path: PathLike):
    """Write the long CSV and the structure JSON (shared edges when every hierarchy agrees)."""
    Path(data_path).parent.mkdir(parents=True, exist_ok=True)
    dataset_frame(datasets).to_csv(data_path, index=False)
    edge_sets = {d.hierarchy_id: d.hierarchy.to_edges() for d in datasets}
    first = next(iter(edge_sets.values()))
    if all(edges == first for edges in edge_sets.values()):
        structure: Dict[str, Any] = {"edges": first}
    else:
        structure = {"hierarchies": {hid: {"edges": e} for hid, e in edge_sets.items()}}
    Path(structure_path).write_text(json.dumps(structure, indent=1))


FORECAST_COLUMNS = ["hierarchy_id", "origin", "method", "node_id", "step", "period", "forecast"]


def forecasts_to_frame(blocks) -> pd.DataFrame:
    """Long table from (hierarchy_id, origin, method, nodes, m x h forecasts) blocks."""
    parts = []
    for hid, origin, method, nodes, Y in blocks:
        Y = np.asarray(Y, dtype=float)
        m, h = Y.shape
        parts.append(pd.DataFrame({
            "hierarchy_id": hid,
            "origin": origin,
            "method": method,
            "node_id": np.repeat(np.array(nodes, dtype=object), h),
            "step": np.tile(np.arange(1, h + 1), m),
            "period": np.tile(np.arange(origin + 1, origin + h + 1), m),
            "forecast": Y.reshape(-1),
        }))
    if not parts:
        return pd.DataFrame(columns=FORECAST_COLUMNS)
    return pd.concat(parts, ignore_index=True)


def forecasts_from_frame(frame: pd.DataFrame, datasets: Sequence[HierSeriesSet]) -> Dict[Tuple[str, int, str], np.ndarray]:
    """(hierarchy_id, origin, method) -> m x h matrix in hierarchy node order."""
    missing = set(FORECAST_COLUMNS) - set(frame.columns)
    if missing:
        raise DataError(f"Forecast table is missing columns {sorted(missing)}")
    by_id = {d.hierarchy_id: d.hierarchy for d in datasets}
    out = {}
    frame = frame.astype({"hierarchy_id": str, "node_id": str, "method": str})
    for (hid, origin, method), part in frame.groupby(["hierarchy_id", "origin", "method"], sort=True):
        if hid not in by_id:
            raise DataError(f"Forecasts reference unknown hierarchy '{hid}'")
        wide = part.pivot(index="node_id", columns="step", values="forecast")
        nodes = list(by_id[hid].nodes)
        if set(wide.index) != set(nodes) or wide.isna().any().any():
            raise DataError("Forecast block does not cover every node and step",
                            hierarchy=hid, origin=int(origin), method=method)
        out[(hid, int(origin), method)] = wide.reindex(nodes).to_numpy(dtype=float)
    return out


def synthetic_edges(levels: Sequence[int]) -> List[Tuple[str, str]]:
    """Balanced tree with equal fan-out; node ids 'total', then 'L{level}_{index}'."""
    if not levels or levels[0] != 1:
        raise ConfigError("levels must start with a single top node", field="synth.levels")
    edges = []
    names = ["total"]
    for depth in range(1, len(levels)):
        if levels[depth] % levels[depth - 1] != 0 or levels[depth] <= levels[depth - 1]:
            raise ConfigError(f"Level sizes {list(levels)} need equal fan-out", field="synth.levels")
        fan = levels[depth] // levels[depth - 1]
        children = [f"L{depth}_{j}" for j in range(levels[depth])]
        for j, child in enumerate(children):
            edges.append((names[j // fan], child))
        names = children
    return edges


def _generate_one(hier: Hierarchy, cfg: SynthConfig, seed: np.random.SeedSequence, hid: str) -> HierSeriesSet:
    rng = np.random.default_rng(seed)
    m_k, n = hier.m_k, cfg.n_periods
    t = np.arange(n, dtype=float)

    base = rng.uniform(*cfg.base_level_range, size=(m_k, 1))
    slope = rng.uniform(*cfg.trend_range, size=(m_k, 1))
    promo = rng.random((m_k, n)) < cfg.promo_prob
    discount = rng.uniform(*cfg.discount_range, size=(m_k, n))
    lift = rng.uniform(*cfg.lift_range, size=(m_k, n))
    common = rng.standard_normal(n)
    own = rng.standard_normal((m_k, n))

    price = np.where(promo, cfg.price_base * (1.0 - discount), cfg.price_base)
    shock = cfg.noise * (np.sqrt(cfg.cross_corr) * common + np.sqrt(1.0 - cfg.cross_corr) * own)
    demand = base * (1.0 + slope * t) * (1.0 + shock) * np.where(promo, lift, 1.0)
    bottom = np.maximum(demand, 0.0)

    return HierSeriesSet(
        hierarchy=hier,
        observations=aggregate_bottom(hier, bottom),
        regressors=_upper_prices(hier, price),
        period_labels=tuple(range(1, n + 1)),
        hierarchy_id=hid,
    )


def generate_synthetic(cfg: Optional[SynthConfig] = None, jobs: int = 1) -> List[HierSeriesSet]:
    """Generate cfg.n_hierarchies coherent retail hierarchies.

    Each hierarchy draws from its own child of SeedSequence(cfg.seed), so the
    output does not depend on jobs.
    """
    from .validation import ConfigValidator

    cfg = cfg or SynthConfig()
    ok, message = ConfigValidator.validate_synth(cfg)
    if not ok:
        raise ConfigError(message)
    hier = build_hierarchy(synthetic_edges(cfg.levels))
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_hierarchies)
    ids = [f"h{i:03d}" for i in range(cfg.n_hierarchies)]

    def make(i: int) -> HierSeriesSet:
        return _generate_one(hier, cfg, seeds[i], ids[i])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs, thread_name_prefix="synth") as pool:
            return list(pool.map(make, range(cfg.n_hierarchies)))
    return [make(i) for i in range(cfg.n_hierarchies)]


def _jsonable(obj: Any) -> Any:
    if is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(config: Any) -> str:
    payload = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def package_versions() -> Dict[str, Optional[str]]:
    versions = {}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def write_manifest(run_dir: PathLike, config: Any, extra: Optional[Dict[str, Any]] = None) -> Path:
    """Write manifest.json into run_dir; only the 'created' field varies between identical runs."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": _jsonable(config),
        "config_hash": config_hash(config),
        "versions": package_versions(),
        "created": datetime.now(timezone.utc).isoformat(),
    }
    manifest.update(_jsonable(extra or {}))
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def write_json(path: PathLike, payload: Any):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True))
