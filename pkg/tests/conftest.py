import numpy as np
import pytest

from hfselect import diagnostics
from hfselect.datastructures import BaseModelSpec, SynthConfig
from hfselect.hierarchy import HierSeriesSet, aggregate_bottom, build_hierarchy
from hfselect.io import generate_synthetic

# total -> A, B; A -> AA, AB; B -> BA, BB, BC
TREE_EDGES = [
    ["total", "A"], ["total", "B"],
    ["A", "AA"], ["A", "AB"],
    ["B", "BA"], ["B", "BB"], ["B", "BC"],
]

SMALL_SYNTH = SynthConfig(n_hierarchies=3, levels=(1, 2, 4), n_periods=64, seed=11)


@pytest.fixture(autouse=True)
def reset_diagnostics():
    diagnostics.get_diagnostics().reset()
    yield
    diagnostics.get_diagnostics().reset()


@pytest.fixture
def tree():
    return build_hierarchy(TREE_EDGES)


@pytest.fixture
def tree_data(tree):
    """Coherent 8 x 60 observations with a price regressor."""
    rng = np.random.default_rng(3)
    n = 60
    t = np.arange(n)
    bottom = 20.0 + 5.0 * np.sin(2 * np.pi * t / 12) + rng.normal(0.0, 1.0, size=(tree.m_k, n))
    bottom += np.arange(tree.m_k)[:, None] * 3.0
    price = 4.0 - 0.5 * (rng.random((tree.m_k, n)) < 0.2)
    regressors = (tree.summing @ price) / tree.summing.sum(axis=1, keepdims=True)
    return HierSeriesSet(hierarchy=tree, observations=aggregate_bottom(tree, bottom),
                         regressors=regressors, hierarchy_id="tree")


@pytest.fixture(scope="session")
def small_datasets():
    return generate_synthetic(SMALL_SYNTH)


@pytest.fixture
def spec():
    return BaseModelSpec()
