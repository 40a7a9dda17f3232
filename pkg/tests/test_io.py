"""Tests for dataset files, forecast tables, manifests and synthetic data."""

import json

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from hfselect.datastructures import SynthConfig
from hfselect.error_handler import ConfigError, DataError
from hfselect.hierarchy import check_coherence
from hfselect.io import (
    config_hash, dataset_frame, forecasts_from_frame, forecasts_to_frame, generate_synthetic, load_dataset,
    save_dataset, synthetic_edges, write_manifest,
)

from conftest import SMALL_SYNTH, TREE_EDGES


def _leaf_rows(n=12):
    rows = []
    for j, leaf in enumerate(["AA", "AB", "BA", "BB", "BC"]):
        for t in range(1, n + 1):
            rows.append({"hierarchy_id": "h1", "node_id": leaf, "period": t, "value": float(j + t),
                         "price": 4.0 - 0.1 * j})
    return pd.DataFrame(rows)


@pytest.fixture
def structure_file(tmp_path):
    path = tmp_path / "structure.json"
    path.write_text(json.dumps({"edges": TREE_EDGES}))
    return path


class TestLoadDataset:
    def test_upper_levels_are_synthesized(self, tmp_path, structure_file):
        data_path = tmp_path / "data.csv"
        _leaf_rows().to_csv(data_path, index=False)
        (data,) = load_dataset(data_path, structure_file)
        assert data.hierarchy_id == "h1"
        assert data.n == 12
        assert data.observations[0, 0] == pytest.approx(sum(j + 1 for j in range(5)))
        assert check_coherence(data.hierarchy, data.observations).ok
        # B covers BA, BB, BC with prices 3.8, 3.7, 3.6
        assert data.regressors[data.hierarchy.index_of("B"), 0] == pytest.approx(3.7)

    def test_parent_column_replaces_structure(self, tmp_path):
        frame = _leaf_rows()
        parents = dict((c, p) for p, c in TREE_EDGES)
        frame["parent_id"] = frame["node_id"].map(parents)
        total = frame.groupby("period", as_index=False)["value"].sum()
        total = total.assign(hierarchy_id="h1", node_id="total", parent_id=np.nan, price=np.nan)
        upper = frame[frame["node_id"].isin(["AA", "AB"])].groupby("period", as_index=False)["value"].sum()
        upper = upper.assign(hierarchy_id="h1", node_id="A", parent_id="total", price=np.nan)
        upper_b = frame[frame["node_id"].str.startswith("B")].groupby("period", as_index=False)["value"].sum()
        upper_b = upper_b.assign(hierarchy_id="h1", node_id="B", parent_id="total", price=np.nan)
        path = tmp_path / "data.csv"
        pd.concat([frame, total, upper, upper_b], ignore_index=True).to_csv(path, index=False)
        (data,) = load_dataset(path)
        assert data.hierarchy.nodes == ("total", "A", "B", "AA", "AB", "BA", "BB", "BC")

    def test_incoherent_upper_rows(self, tmp_path, structure_file):
        frame = _leaf_rows()
        bad = pd.DataFrame({"hierarchy_id": "h1", "node_id": "A", "period": range(1, 13), "value": 999.0})
        path = tmp_path / "data.csv"
        pd.concat([frame, bad], ignore_index=True).to_csv(path, index=False)
        with pytest.raises(DataError, match="incoherent"):
            load_dataset(path, structure_file)

    @pytest.mark.parametrize("mutate, fragment", [
        (lambda f: f[f["node_id"] != "BC"], "Leaf series missing"),
        (lambda f: f.drop(index=3), "Ragged"),
        (lambda f: pd.concat([f, f.iloc[:1]]), "Duplicate"),
        (lambda f: f.assign(node_id=f["node_id"].replace("AA", "ZZ")), "Unknown nodes"),
        (lambda f: f.drop(columns=["value"]), "missing column"),
    ])
    def test_bad_files(self, tmp_path, structure_file, mutate, fragment):
        path = tmp_path / "data.csv"
        mutate(_leaf_rows()).to_csv(path, index=False)
        with pytest.raises(DataError, match=fragment):
            load_dataset(path, structure_file)

    def test_missing_files(self, tmp_path, structure_file):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope.csv", structure_file)
        path = tmp_path / "data.csv"
        _leaf_rows().to_csv(path, index=False)
        with pytest.raises(DataError, match="parent_id"):
            load_dataset(path)

    def test_save_and_reload(self, tmp_path, small_datasets):
        save_dataset(small_datasets, tmp_path / "data.csv", tmp_path / "structure.json")
        assert "edges" in json.loads((tmp_path / "structure.json").read_text())
        loaded = load_dataset(tmp_path / "data.csv", tmp_path / "structure.json")
        assert [d.hierarchy_id for d in loaded] == ["h000", "h001", "h002"]
        for a, b in zip(small_datasets, loaded):
            np.testing.assert_allclose(a.observations, b.observations)
            np.testing.assert_allclose(a.regressors, b.regressors)

    def test_dataset_frame_columns(self, small_datasets):
        frame = dataset_frame(small_datasets[:1])
        assert list(frame.columns) == ["hierarchy_id", "node_id", "period", "value", "price"]
        assert len(frame) == small_datasets[0].hierarchy.m * small_datasets[0].n


class TestForecastTables:
    def test_long_table_and_back(self, tree_data):
        Y = np.arange(16, dtype=float).reshape(8, 2)
        frame = forecasts_to_frame([("tree", 40, "BU", tree_data.hierarchy.nodes, Y)])
        assert len(frame) == 16
        assert frame["period"].tolist()[:2] == [41, 42]
        blocks = forecasts_from_frame(frame.sample(frac=1.0, random_state=0), [tree_data])
        np.testing.assert_array_equal(blocks[("tree", 40, "BU")], Y)

    def test_incomplete_block(self, tree_data):
        frame = forecasts_to_frame([("tree", 40, "BU", tree_data.hierarchy.nodes, np.ones((8, 2)))])
        with pytest.raises(DataError):
            forecasts_from_frame(frame.iloc[1:], [tree_data])
        with pytest.raises(DataError):
            forecasts_from_frame(frame.drop(columns=["step"]), [tree_data])

    def test_empty_table(self):
        assert forecasts_to_frame([]).empty


class TestSynthetic:
    def test_shape_and_coherence(self, small_datasets):
        assert len(small_datasets) == 3
        for data in small_datasets:
            assert data.hierarchy.series_per_level == [1, 2, 4]
            assert data.n == SMALL_SYNTH.n_periods
            assert check_coherence(data.hierarchy, data.observations).ok
            assert np.all(data.observations >= 0.0)
            assert data.regressors.max() <= SMALL_SYNTH.price_base

    def test_seeded_and_thread_independent(self):
        cfg = SynthConfig(n_hierarchies=4, levels=(1, 3), n_periods=30, seed=5)
        a = generate_synthetic(cfg, jobs=1)
        b = generate_synthetic(cfg, jobs=3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.observations, y.observations)
        c = generate_synthetic(SynthConfig(n_hierarchies=4, levels=(1, 3), n_periods=30, seed=6))
        assert not np.array_equal(a[0].observations, c[0].observations)

    def test_promotions_lower_price_and_lift_demand(self):
        cfg = SynthConfig(n_hierarchies=1, levels=(1, 2), n_periods=400, promo_prob=0.3, noise=0.05,
                          trend_range=(0.0, 0.0), seed=2)
        (data,) = generate_synthetic(cfg)
        price = data.regressors[-1]
        demand = data.observations[-1]
        promo = price < cfg.price_base
        assert promo.any() and (~promo).any()
        assert demand[promo].mean() > 1.5 * demand[~promo].mean()

    def test_promotion_counts_are_binomial(self):
        n, p = 120, 0.1
        counts = []
        for seed in range(200):
            (data,) = generate_synthetic(SynthConfig(n_hierarchies=1, levels=(1, 2), n_periods=n, promo_prob=p,
                                                     seed=seed))
            bottom_prices = data.regressors[data.hierarchy.m - data.hierarchy.m_k:]
            counts.extend((bottom_prices < 4.0).sum(axis=1).tolist())
        counts = np.array(counts)
        se = np.sqrt(n * p * (1 - p) / len(counts))
        assert abs(counts.mean() - n * p) < 4 * se
        low, high = stats.binom.interval(0.99, n, p)
        assert np.mean((counts >= low) & (counts <= high)) >= 0.97

    def test_lift_and_base_level_follow_the_config(self):
        cfg = dict(n_hierarchies=1, levels=(1, 2), n_periods=120, noise=0.0, trend_range=(0.0, 0.0))
        bases, lifts = [], []
        for seed in range(100):
            (data,) = generate_synthetic(SynthConfig(seed=seed, **cfg))
            m, m_k = data.hierarchy.m, data.hierarchy.m_k
            for demand, price in zip(data.observations[m - m_k:], data.regressors[m - m_k:]):
                promo = price < 4.0
                base = demand[~promo]
                np.testing.assert_allclose(base, base[0])
                bases.append(base[0])
                lifts.extend((demand[promo] / base[0]).tolist())
        bases, lifts = np.array(bases), np.array(lifts)
        assert bases.min() >= 50.0 and bases.max() <= 500.0
        assert lifts.min() >= 2.0 - 1e-9 and lifts.max() <= 5.0 + 1e-9
        # uniform draws: mean (low + high) / 2, sd (high - low) / sqrt(12)
        assert abs(bases.mean() - 275.0) < 4 * 450.0 / np.sqrt(12 * len(bases))
        assert abs(lifts.mean() - 3.5) < 4 * 3.0 / np.sqrt(12 * len(lifts))

    def test_edges(self):
        edges = synthetic_edges([1, 2, 4])
        assert edges[:2] == [("total", "L1_0"), ("total", "L1_1")]
        assert ("L1_1", "L2_3") in edges
        with pytest.raises(ConfigError):
            synthetic_edges([1, 3, 4])
        with pytest.raises(ConfigError):
            synthetic_edges([2, 4])

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            generate_synthetic(SynthConfig(promo_prob=1.5))


class TestManifest:
    def test_manifest_contents(self, tmp_path):
        path = write_manifest(tmp_path / "run", {"alpha": 0.05}, {"command": "synth"})
        manifest = json.loads(path.read_text())
        assert manifest["config_hash"] == config_hash({"alpha": 0.05})
        assert manifest["command"] == "synth"
        assert "numpy" in manifest["versions"]
        assert "created" in manifest

    def test_hash_ignores_key_order(self):
        assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": (1, 2), "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})
