"""Tests for the BU, TD and MinT-shrink reconciliation matrices."""

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from hfselect import diagnostics
from hfselect.datastructures import Method
from hfselect.error_handler import DimensionError, ValidationError
from hfselect.hierarchy import HierSeriesSet, aggregate_bottom, build_hierarchy, check_coherence
from hfselect.reconcile import (
    build_g, g_bottom_up, g_from_weights, g_mint_shrink, g_top_down, reconcile, shrinkage_estimate,
    td_proportions, unbiasedness,
)
from hfselect.tsmodel import forecast_hierarchy


@pytest.fixture
def residuals(tree):
    rng = np.random.default_rng(8)
    bottom = rng.normal(size=(tree.m_k, 40))
    return aggregate_bottom(tree, bottom) + 0.3 * rng.normal(size=(tree.m, 40))


class TestBottomUp:
    def test_structure(self, tree):
        g = g_bottom_up(tree)
        assert g.G.shape == (5, 8)
        np.testing.assert_array_equal(g.G[:, :3], 0.0)
        np.testing.assert_array_equal(g.G[:, 3:], np.eye(5))
        assert unbiasedness(g, tree) == (True, True)

    def test_reconciled_bottom_equals_base_bottom(self, tree):
        base = np.random.default_rng(0).normal(size=(8, 3))
        Y = reconcile(g_bottom_up(tree), tree, base)
        np.testing.assert_allclose(Y[3:], base[3:])
        assert check_coherence(tree, Y).ok


class TestTopDown:
    def test_proportions_sum_to_one(self, tree_data):
        p, fell_back = td_proportions(tree_data.hierarchy, tree_data, 48)
        assert not fell_back
        assert p.sum() == pytest.approx(1.0)
        window = tree_data.window(48)
        assert p[0] == pytest.approx(window[3].sum() / window[0].sum())

    def test_top_level_is_preserved(self, tree_data):
        tree = tree_data.hierarchy
        g = g_top_down(tree, tree_data, 48)
        base = np.random.default_rng(1).normal(50.0, 5.0, size=(8, 4))
        Y = reconcile(g, tree, base)
        np.testing.assert_allclose(Y[0], base[0])
        assert check_coherence(tree, Y).ok
        assert unbiasedness(g, tree) == (False, False)

    def test_zero_total_falls_back_to_uniform(self, tree):
        data = HierSeriesSet(hierarchy=tree, observations=np.zeros((8, 20)), hierarchy_id="zeros")
        g = g_top_down(tree, data, 20)
        np.testing.assert_allclose(g.G[:, 0], 0.2)
        assert diagnostics.TD_UNIFORM_FALLBACK in g.warnings
        assert diagnostics.get_diagnostics().count(diagnostics.TD_UNIFORM_FALLBACK) == 1

    def test_origin_out_of_range(self, tree_data):
        with pytest.raises(ValidationError):
            td_proportions(tree_data.hierarchy, tree_data, 0)
        with pytest.raises(ValidationError):
            td_proportions(tree_data.hierarchy, tree_data, 61)


class TestShrinkage:
    def test_lambda_in_unit_interval(self, residuals):
        est = shrinkage_estimate(residuals)
        assert 0.0 <= est.lam <= 1.0
        np.testing.assert_allclose(est.W_shrunk, est.W_shrunk.T)
        np.testing.assert_allclose(np.diag(est.W_shrunk), est.W1_diag)

    def test_lambda_override(self, residuals):
        est = shrinkage_estimate(residuals, lambda_override=1.0)
        np.testing.assert_allclose(est.W_shrunk, np.diag(est.W1_diag))
        assert shrinkage_estimate(residuals, lambda_override=3.0).lam == 1.0

    def test_uncorrelated_residuals_shrink_hard(self):
        rng = np.random.default_rng(9)
        est = shrinkage_estimate(rng.normal(size=(6, 30)))
        assert est.lam > 0.3

    def test_needs_two_columns(self):
        with pytest.raises(ValidationError):
            shrinkage_estimate(np.ones((4, 1)))


class TestMinT:
    def test_unbiased_and_coherent(self, tree, residuals):
        g = g_mint_shrink(tree, residuals)
        assert g.method == Method.COM
        assert unbiasedness(g, tree) == (True, True)
        Y = reconcile(g, tree, np.random.default_rng(2).normal(size=(8, 4)))
        assert check_coherence(tree, Y).ok
        assert 0.0 <= g.metadata["lambda"] <= 1.0

    def test_identity_weights_give_ols(self, tree):
        S = tree.summing
        G, path = g_from_weights(S, np.eye(tree.m))
        np.testing.assert_allclose(G, np.linalg.solve(S.T @ S, S.T), atol=1e-10)
        assert path == "solve"

    def test_zero_variance_series_is_floored(self, tree, residuals):
        residuals = residuals.copy()
        residuals[4] = 0.0
        g = g_mint_shrink(tree, residuals)
        assert diagnostics.MINT_VARIANCE_FLOOR in g.warnings
        assert diagnostics.MINT_JITTER in g.warnings
        S = tree.summing
        np.testing.assert_allclose(S @ g.G @ S, S, atol=1e-4)

    def test_residual_rows_must_match(self, tree):
        with pytest.raises(DimensionError):
            g_mint_shrink(tree, np.ones((5, 10)))


class TestDispatch:
    def test_build_g_for_every_method(self, tree_data, spec):
        base = forecast_hierarchy(tree_data, spec, 48, 4)
        tree = tree_data.hierarchy
        for method in Method:
            g = build_g(method, tree, tree_data, 48, base.residuals)
            assert g.method == method
            Y = reconcile(g, tree, base)
            assert Y.shape == (8, 4)
            assert check_coherence(tree, Y).ok

    def test_mint_needs_residuals(self, tree_data):
        with pytest.raises(ValidationError):
            build_g(Method.COM, tree_data.hierarchy, tree_data, 48)

    def test_reconcile_shape_mismatch(self, tree):
        with pytest.raises(DimensionError):
            reconcile(g_bottom_up(tree), tree, np.ones((5, 2)))


class TestMinTProperties:
    """Algebraic identities of the trace-minimizing projection."""

    @staticmethod
    def wls(S, d):
        Winv = np.diag(1.0 / d)
        return np.linalg.solve(S.T @ Winv @ S, S.T @ Winv)

    def test_identity_covariance_through_shrinkage_is_ols(self, tree):
        # rows of +-1 have unit mean square, so the diagonal target is exactly I
        signs = np.random.default_rng(5).choice([-1.0, 1.0], size=(tree.m, 24))
        g = g_mint_shrink(tree, signs, lambda_override=1.0)
        S = tree.summing
        np.testing.assert_allclose(g.G, np.linalg.solve(S.T @ S, S.T), atol=1e-10)

    def test_full_shrinkage_is_diagonal_wls(self, tree, residuals):
        g = g_mint_shrink(tree, residuals, lambda_override=1.0)
        expected = self.wls(tree.summing, (residuals ** 2).mean(axis=1))
        np.testing.assert_allclose(g.G, expected, atol=1e-10)

    @pytest.mark.parametrize("c", [0.1, 10.0])
    def test_residual_scale_does_not_change_g(self, tree, residuals, c):
        g = g_mint_shrink(tree, residuals)
        scaled = g_mint_shrink(tree, c * residuals)
        assert scaled.metadata["lambda"] == pytest.approx(g.metadata["lambda"], abs=1e-12)
        np.testing.assert_allclose(scaled.G, g.G, atol=1e-10)

    def test_sgs_equals_s_for_random_residuals(self, tree):
        rng = np.random.default_rng(21)
        S = tree.summing
        for _ in range(50):
            scales = rng.uniform(0.1, 5.0, size=(tree.m, 1))
            g = g_mint_shrink(tree, scales * rng.normal(size=(tree.m, 30)))
            np.testing.assert_allclose(S @ g.G @ S, S, atol=1e-8)

    def test_coherent_base_is_left_unchanged(self, tree, residuals):
        base = aggregate_bottom(tree, np.random.default_rng(6).normal(10.0, 2.0, size=(tree.m_k, 3)))
        Y = reconcile(g_mint_shrink(tree, residuals), tree, base)
        np.testing.assert_allclose(Y, base, atol=1e-8)

    def test_projection_is_idempotent(self, tree, residuals):
        P = tree.summing @ g_mint_shrink(tree, residuals).G
        np.testing.assert_allclose(P @ P, P, atol=1e-8)

    def test_uncorrelated_short_residuals_mostly_shrink_past_half(self, tree):
        lams = [shrinkage_estimate(np.random.default_rng(seed).normal(size=(tree.m, 10))).lam
                for seed in range(100)]
        assert sum(lam >= 0.5 for lam in lams) >= 95

    @settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.lists(st.integers(min_value=1, max_value=3), min_size=1, max_size=4),
           st.integers(min_value=0, max_value=2**31 - 1))
    def test_every_method_is_coherent_on_random_trees(self, fanouts, seed):
        edges, frontier, counter = [], ["root"], 0
        for fan in fanouts:
            nxt = []
            for parent in frontier:
                for _ in range(fan):
                    counter += 1
                    edges.append([parent, f"n{counter}"])
                    nxt.append(f"n{counter}")
            frontier = nxt
        h = build_hierarchy(edges)
        rng = np.random.default_rng(seed)
        data = HierSeriesSet(hierarchy=h, observations=aggregate_bottom(h, rng.uniform(1.0, 10.0, (h.m_k, 12))))
        residuals = rng.normal(size=(h.m, 20))
        base = rng.normal(5.0, 2.0, size=(h.m, 3))
        for method in Method:
            g = build_g(method, h, data, 12, residuals)
            assert check_coherence(h, reconcile(g, h, base)).ok
