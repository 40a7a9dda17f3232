"""Tests for accuracy metrics, rolling evaluation, MCB and report tables."""

import numpy as np
import pandas as pd
import pytest

from hfselect import diagnostics
from hfselect.datastructures import EvalRecord, Method
from hfselect.error_handler import DimensionError, ValidationError
from hfselect.evaluation import (
    accuracy_ratio_summary, accuracy_ratios, classifier_metrics, level_table, mase, mcb_frame, mcb_test,
    q_value, records_from_frame, records_to_frame, rmsse, rolling_eval, score_origin,
)
from hfselect.hierarchy import check_coherence


def _record(method, score, node="n0", origin=10, hid="h0", level=0, degenerate=False):
    return EvalRecord(hierarchy_id=hid, origin=origin, node_id=node, level=level, method=method,
                      mase=score, rmsse=score, h=4, degenerate=degenerate)


def _ranked_records(n_instances=10):
    records = []
    for i in range(n_instances):
        for method, score in (("A", 1.0), ("B", 2.0), ("C", 3.0)):
            records.append(_record(method, score + 0.01 * i, node=f"n{i}"))
    return records


class TestScaledErrors:
    def test_mase_value(self):
        assert mase([5.0, 6.0], [4.0, 6.0], [1.0, 2.0, 3.0, 4.0]) == pytest.approx(0.5)

    def test_rmsse_value(self):
        assert rmsse([5.0, 6.0], [4.0, 6.0], [1.0, 2.0, 3.0, 4.0]) == pytest.approx(np.sqrt(0.5))

    def test_perfect_forecast_scores_zero(self):
        assert mase([3.0], [3.0], [1.0, 5.0, 2.0]) == 0.0

    def test_alternating_insample(self):
        insample = [0.0, 2.0, 0.0, 2.0, 0.0]
        assert mase([2.0], [0.0], insample) == pytest.approx(1.0, abs=1e-12)
        assert rmsse([2.0], [0.0], insample) == pytest.approx(1.0, abs=1e-12)

    def test_joint_scaling_leaves_scores_unchanged(self):
        rng = np.random.default_rng(12)
        for _ in range(1000):
            n, h = rng.integers(3, 40), rng.integers(1, 9)
            insample = rng.normal(10.0, 3.0, size=n)
            actuals = rng.normal(10.0, 3.0, size=h)
            forecasts = actuals + rng.normal(0.0, 1.0, size=h)
            c = float(np.exp(rng.uniform(-6.0, 6.0)))
            for metric in (mase, rmsse):
                base = metric(actuals, forecasts, insample)
                scaled = metric(c * actuals, c * forecasts, c * insample)
                assert abs(scaled - base) <= 1e-10 * max(1.0, base)

    def test_flat_insample_is_undefined(self):
        assert np.isnan(mase([1.0], [2.0], [3.0, 3.0, 3.0]))
        assert np.isnan(rmsse([1.0], [2.0], [3.0, 3.0, 3.0]))

    def test_shape_checks(self):
        with pytest.raises(DimensionError):
            mase([1.0, 2.0], [1.0], [1.0, 2.0])
        with pytest.raises(ValidationError):
            mase([1.0], [1.0], [1.0])


class TestScoreOrigin:
    def test_records_per_method_and_node(self, tree_data):
        tree = tree_data.hierarchy
        forecasts = {"BU": tree_data.observations[:, 48:52] + 1.0, "TD": tree_data.observations[:, 48:52]}
        records = score_origin(tree_data, 48, 4, forecasts)
        assert len(records) == 2 * tree.m
        perfect = [r for r in records if r.method == "TD"]
        assert all(r.mase == 0.0 and r.rmsse == 0.0 for r in perfect)
        assert {r.level for r in records} == {0, 1, 2}

    def test_degenerate_series_are_flagged(self, tree):
        from hfselect.hierarchy import HierSeriesSet, aggregate_bottom
        bottom = np.ones((5, 20))
        bottom[0] = np.arange(20.0)
        data = HierSeriesSet(hierarchy=tree, observations=aggregate_bottom(tree, bottom))
        records = score_origin(data, 16, 4, {"BU": np.zeros((8, 4))})
        flat = {r.node_id for r in records if r.degenerate}
        assert flat == {"AB", "B", "BA", "BB", "BC"}
        assert all(r.mase == 0.0 for r in records if r.degenerate)
        assert diagnostics.get_diagnostics().count(diagnostics.DEGENERATE_METRIC) == 5

    def test_horizon_past_data_end(self, tree_data):
        with pytest.raises(ValidationError):
            score_origin(tree_data, 58, 4, {})


class TestRollingEval:
    def test_origins_and_order(self, tree_data, spec):
        records = rolling_eval(tree_data, spec, ["mint", "bu", "td"], 40, 52, 4)
        origins = sorted({r.origin for r in records})
        assert origins == [40, 44, 48, 52]
        assert len(records) == 4 * 3 * tree_data.hierarchy.m
        assert [r.method for r in records[:24:8]] == ["BU", "TD", "COM"]

    def test_reconciled_forecasts_are_coherent(self, tree_data, spec):
        from hfselect.evaluation import reconciled_forecasts
        out = reconciled_forecasts(tree_data, spec, list(Method), 44, 4)
        assert set(out) == {"BU", "TD", "COM"}
        for Y in out.values():
            assert check_coherence(tree_data.hierarchy, Y).ok

    def test_thread_count_does_not_change_results(self, tree_data, spec):
        one = records_to_frame(rolling_eval(tree_data, spec, list(Method), 40, 48, 4, jobs=1))
        many = records_to_frame(rolling_eval(tree_data, spec, list(Method), 40, 48, 4, jobs=3))
        pd.testing.assert_frame_equal(one, many)

    @pytest.mark.parametrize("start, end, h", [(4, 40, 4), (40, 36, 4), (40, 58, 4), (40, 48, 0)])
    def test_invalid_windows(self, tree_data, spec, start, end, h):
        with pytest.raises(ValidationError):
            rolling_eval(tree_data, spec, list(Method), start, end, h)

    def test_frame_round_trip(self, tree_data, spec):
        records = rolling_eval(tree_data, spec, [Method.BU], 48, 48, 4)
        assert records_from_frame(records_to_frame(records)) == records


class TestMcb:
    def test_mean_ranks_and_significance(self):
        result = mcb_test(_ranked_records(10))
        assert result.mean_ranks == {"A": 1.0, "B": 2.0, "C": 3.0}
        assert result.best == "A"
        assert result.q_alpha == q_value(0.05, 3)
        r = q_value(0.05, 3) * np.sqrt(3 * 4 / (12.0 * 10))
        assert result.critical_difference == pytest.approx(r)
        assert result.intervals["B"] == pytest.approx((2.0 - r / 2, 2.0 + r / 2))
        assert result.significantly_worse == {"A": False, "B": True, "C": True}

    def test_close_methods_are_not_separated(self):
        records = []
        for i in range(6):
            a, b = (1.0, 2.0) if i % 2 else (2.0, 1.0)
            records += [_record("A", a, node=f"n{i}"), _record("B", b, node=f"n{i}")]
        result = mcb_test(records)
        assert result.mean_ranks["A"] == result.mean_ranks["B"] == 1.5
        assert not any(result.significantly_worse.values())

    def test_degenerate_instances_are_dropped(self):
        records = _ranked_records(10) + [_record(m, 0.0, node="flat", degenerate=True) for m in "ABC"]
        assert mcb_test(records).n_instances == 10

    def test_ties_share_ranks(self):
        records = [_record("A", 1.0), _record("B", 1.0), _record("C", 2.0)]
        assert mcb_test(records, q_alpha=2.0).mean_ranks == {"A": 1.5, "B": 1.5, "C": 3.0}

    def test_missing_coverage(self):
        records = _ranked_records(3)[:-1]
        with pytest.raises(ValidationError, match="coverage"):
            mcb_test(records)

    def test_frame_sorted_by_rank(self):
        frame = mcb_frame(mcb_test(_ranked_records(10)))
        assert frame["method"].tolist() == ["A", "B", "C"]
        assert list(frame.columns) == ["method", "mean_rank", "lower", "upper", "significantly_worse"]

    def test_q_table(self):
        assert q_value(0.05, 6) == pytest.approx(3.219)
        assert q_value(0.05, 6, nemenyi=True) == pytest.approx(2.850)
        assert q_value(0.05, 2, nemenyi=True) == pytest.approx(1.960)
        with pytest.raises(ValidationError):
            q_value(0.2, 3)
        with pytest.raises(ValidationError):
            q_value(0.05, 20)

    @pytest.mark.parametrize("nemenyi", [False, True])
    def test_q_grows_with_methods_and_confidence(self, nemenyi):
        for alpha in (0.10, 0.05, 0.01):
            row = [q_value(alpha, k, nemenyi=nemenyi) for k in range(2, 11)]
            assert all(a < b for a, b in zip(row, row[1:])), (alpha, row)
        for k in range(2, 11):
            assert q_value(0.10, k, nemenyi=nemenyi) < q_value(0.05, k, nemenyi=nemenyi) < q_value(0.01, k, nemenyi=nemenyi)

    def test_mcb_table_is_one_rescaling_of_nemenyi(self):
        scale = 3.219 / 2.850
        for alpha in (0.10, 0.05, 0.01):
            for k in range(2, 11):
                assert q_value(alpha, k) == pytest.approx(q_value(alpha, k, nemenyi=True) * scale, abs=1e-3)

    def test_six_methods_over_7425_instances(self):
        rng = np.random.default_rng(4)
        methods = ["BU", "TD", "COM", "CHF", "M5", "M6"]
        # one decimal so that ties occur
        scores = np.round(rng.uniform(0.5, 1.5, size=(7425, len(methods))), 1)
        records = [_record(m, float(scores[i, j]), node=f"n{i}")
                   for i in range(scores.shape[0]) for j, m in enumerate(methods)]
        result = mcb_test(records, alpha=0.05)
        assert result.n_instances == 7425
        assert result.q_alpha == pytest.approx(3.219)
        assert result.critical_difference == pytest.approx(3.219 * np.sqrt(42 / 89100), rel=1e-9)
        assert result.critical_difference == pytest.approx(0.0698887, abs=1e-6)
        assert sum(result.mean_ranks.values()) == pytest.approx(6 * 7 / 2, abs=1e-9)

    def test_rank_sum_with_ties(self):
        records = [_record("A", 1.0), _record("B", 1.0), _record("C", 1.0), _record("D", 0.5)]
        result = mcb_test(records, q_alpha=2.0)
        assert sum(result.mean_ranks.values()) == pytest.approx(4 * 5 / 2, abs=1e-9)
        assert result.mean_ranks["D"] == 1.0


class TestClassifierMetrics:
    def test_per_class_scores(self):
        table = classifier_metrics([0, 0, 1, 1], [0, 1, 1, 1])
        assert table["class"].tolist() == ["BU", "TD", "COM"]
        bu, td, com = (table.iloc[i] for i in range(3))
        assert bu["precision"] == pytest.approx(0.5)
        assert bu["recall"] == pytest.approx(1.0)
        assert td["precision"] == pytest.approx(1.0)
        assert td["recall"] == pytest.approx(2 / 3)
        assert com["precision"] == 0.0
        assert bool(com["zero_predictions"])
        assert diagnostics.get_diagnostics().count(diagnostics.ZERO_PREDICTION_CLASS, "COM") == 1

    def test_empty_predictions(self):
        with pytest.raises(ValidationError):
            classifier_metrics([], [])


class TestTables:
    def test_level_table(self):
        records = [_record("BU", 1.0, level=0), _record("BU", 3.0, node="n1", level=1),
                   _record("TD", 2.0, level=0), _record("TD", 2.0, node="n1", level=1),
                   _record("TD", 0.0, node="n2", level=1, degenerate=True)]
        table = level_table(records)
        assert list(table.columns) == ["level_0", "level_1", "average"]
        assert table.loc["BU", "average"] == pytest.approx(2.0)
        assert table.loc["TD", "level_1"] == pytest.approx(2.0)

    def test_unknown_metric(self):
        with pytest.raises(ValidationError):
            level_table(_ranked_records(2), "smape")

    def test_accuracy_ratios(self):
        records = [_record("CHF", 1.0), _record("BU", 2.0), _record("TD", 0.5)]
        ratios = accuracy_ratios(records)
        mase_rows = ratios[ratios["metric"] == "mase"].set_index("benchmark")
        assert mase_rows.loc["BU", "ratio"] == pytest.approx(0.5)
        assert mase_rows.loc["TD", "ratio"] == pytest.approx(2.0)
        summary = accuracy_ratio_summary(ratios)
        assert set(summary["benchmark"]) == {"BU", "TD"}
        assert summary["count"].sum() == len(ratios)

    def test_zero_benchmark_is_skipped(self):
        ratios = accuracy_ratios([_record("CHF", 1.0), _record("BU", 0.0)])
        assert ratios.empty
        assert diagnostics.get_diagnostics().count(diagnostics.ZERO_BENCHMARK) == 2

    def test_ratios_need_chf_records(self):
        with pytest.raises(ValidationError):
            accuracy_ratios([_record("BU", 1.0)])
