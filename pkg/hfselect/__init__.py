"""Conditional hierarchical forecasting: pick a reconciliation method per hierarchy."""
__version__ = "0.1.0"

from .datastructures import Method  # noqa: E402
from .hierarchy import HierSeriesSet, Hierarchy, build_hierarchy  # noqa: E402

__all__ = ["Method", "HierSeriesSet", "Hierarchy", "build_hierarchy", "__version__"]
