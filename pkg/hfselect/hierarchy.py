"""Cross-sectional hierarchies: node ordering, summing matrix and coherence checks."""
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .datastructures import CoherenceReport
from .error_handler import DataError, DimensionError, ValidationError

# Absolute floor of the per-period coherence threshold
COHERENCE_FLOOR = 1e-9
# Relative tolerance used when validating observed data
DATA_COHERENCE_TOL = 1e-6

Edge = Tuple[str, str]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Hierarchy:
    """A rooted tree of series with its summing matrix S (m x m_k).

    Row order: internal nodes level by level, then leaves level by level, each
    group stable by first appearance in the edge list. For balanced trees this is
    plain level-major order; for unbalanced trees it keeps the bottom block of S
    equal to the identity.
    """

    nodes: Tuple[str, ...]
    parent_of: Dict[str, str]
    level_of: Dict[str, int]
    summing: np.ndarray
    edges: Tuple[Edge, ...] = field(default=())

    @property
    def m(self) -> int:
        return len(self.nodes)

    @property
    def m_k(self) -> int:
        return self.summing.shape[1]

    @property
    def k(self) -> int:
        return max(self.level_of.values()) + 1

    @property
    def top(self) -> str:
        return self.nodes[0]

    @property
    def bottom_nodes(self) -> Tuple[str, ...]:
        return self.nodes[self.m - self.m_k:]

    @property
    def levels(self) -> np.ndarray:
        """Level index of each row of S."""
        return np.array([self.level_of[n] for n in self.nodes], dtype=int)

    @property
    def series_per_level(self) -> List[int]:
        """m_i: number of series at each level."""
        return np.bincount(self.levels, minlength=self.k).tolist()

    def index_of(self, node: str) -> int:
        return self.nodes.index(node)

    def level_nodes(self, level: int) -> List[str]:
        return [n for n in self.nodes if self.level_of[n] == level]

    def children_of(self, node: str) -> List[str]:
        return [n for n in self.nodes if self.parent_of.get(n) == node]

    def to_edges(self) -> List[List[str]]:
        return [[p, c] for p, c in self.edges]


def build_hierarchy(edges: Iterable[Sequence[str]]) -> Hierarchy:
    """Build a hierarchy from (parent, child) edges.

    Raises:
        ValidationError: on duplicate children, multiple roots, cycles or an empty edge list.
    """
    edge_list: List[Edge] = [(str(p), str(c)) for p, c in edges]
    if not edge_list:
        raise ValidationError("Hierarchy needs at least one edge")

    appearance: Dict[str, int] = {}
    parent_of: Dict[str, str] = {}
    for parent, child in edge_list:
        for node in (parent, child):
            appearance.setdefault(node, len(appearance))
        if parent == child:
            raise ValidationError(f"Cycle detected: node '{child}' is its own parent")
        if child in parent_of:
            raise ValidationError(f"Duplicate child '{child}' (parents '{parent_of[child]}' and '{parent}')")
        parent_of[child] = parent

    roots = [n for n in appearance if n not in parent_of]
    if len(roots) > 1:
        raise ValidationError(f"Multiple roots: {roots}")
    if not roots:
        raise ValidationError("Cycle detected: no root node")

    level_of: Dict[str, int] = {}
    for node in appearance:
        chain = [node]
        current = node
        while current in parent_of:
            current = parent_of[current]
            if current in chain:
                raise ValidationError(f"Cycle detected through node '{current}'")
            chain.append(current)
        level_of[node] = len(chain) - 1

    parents = set(parent_of.values())
    leaves = [n for n in appearance if n not in parents]
    internal = [n for n in appearance if n in parents]
    order_key = lambda n: (level_of[n], appearance[n])  # noqa: E731
    nodes = tuple(sorted(internal, key=order_key) + sorted(leaves, key=order_key))

    # Ancestor closure, no level arithmetic
    col_of = {leaf: j for j, leaf in enumerate(nodes[len(internal):])}
    row_of = {node: i for i, node in enumerate(nodes)}
    S = np.zeros((len(nodes), len(leaves)))
    for leaf, j in col_of.items():
        current = leaf
        S[row_of[current], j] = 1.0
        while current in parent_of:
            current = parent_of[current]
            S[row_of[current], j] = 1.0

    return Hierarchy(
        nodes=nodes,
        parent_of=dict(parent_of),
        level_of=level_of,
        summing=_readonly(S),
        edges=tuple(edge_list),
    )


def hierarchy_from_dict(spec: Dict) -> Hierarchy:
    """Build from the structure JSON layout ``{"edges": [[parent, child], ...]}``."""
    if "edges" not in spec:
        raise DataError("Structure JSON needs an 'edges' list")
    return build_hierarchy(spec["edges"])


def aggregate_bottom(h: Hierarchy, bottom: np.ndarray) -> np.ndarray:
    """Y = S . Y_bottom."""
    bottom = np.asarray(bottom, dtype=float)
    if bottom.ndim == 1:
        bottom = bottom[:, None]
    if bottom.shape[0] != h.m_k:
        raise DimensionError(f"Bottom matrix has {bottom.shape[0]} rows, hierarchy has {h.m_k} leaves")
    return h.summing @ bottom


def check_coherence(h: Hierarchy, values: np.ndarray, tol: float = 1e-8) -> CoherenceReport:
    """Per-period max |values - S . values_bottom|, flagged against tol * (1 + |top|)."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != h.m:
        raise DimensionError(f"Values have {values.shape[0]} rows, hierarchy has {h.m} series")
    implied = h.summing @ values[h.m - h.m_k:]
    violation = np.abs(values - implied).max(axis=0)
    threshold = np.maximum(tol * (1.0 + np.abs(values[0])), COHERENCE_FLOOR)
    flagged = [int(t) for t in np.flatnonzero(violation > threshold)]
    return CoherenceReport(violation=violation, tolerance=threshold, flagged_periods=flagged)


@dataclass(frozen=True, eq=False)
class HierSeriesSet:
    """Aligned observations (m x n) of one hierarchy, with optional regressors."""

    hierarchy: Hierarchy
    observations: np.ndarray
    regressors: Optional[np.ndarray] = None
    period_labels: Optional[Tuple] = None
    hierarchy_id: str = "h0"

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim != 2 or obs.shape[0] != self.hierarchy.m:
            raise DimensionError(
                f"Observations must be {self.hierarchy.m} x n, got {obs.shape}",
                hierarchy=self.hierarchy_id,
            )
        if not np.all(np.isfinite(obs)):
            raise DataError("Observations contain missing or non-finite values", hierarchy=self.hierarchy_id)
        object.__setattr__(self, "observations", _readonly(obs))

        if self.regressors is not None:
            reg = np.asarray(self.regressors, dtype=float)
            if reg.shape != obs.shape:
                raise DimensionError(f"Regressors must match observations {obs.shape}, got {reg.shape}",
                                     hierarchy=self.hierarchy_id)
            if not np.all(np.isfinite(reg)):
                raise DataError("Regressors contain missing values", hierarchy=self.hierarchy_id)
            object.__setattr__(self, "regressors", _readonly(reg))

        if self.period_labels is not None:
            labels = tuple(self.period_labels)
            if len(labels) != obs.shape[1]:
                raise DimensionError("period_labels length must equal n", hierarchy=self.hierarchy_id)
            object.__setattr__(self, "period_labels", labels)

        report = check_coherence(self.hierarchy, obs, DATA_COHERENCE_TOL)
        if not report.ok:
            raise DataError(
                f"Observations are incoherent at periods {report.flagged_periods[:20]}",
                hierarchy=self.hierarchy_id,
                max_violation=report.max_violation,
            )

    @property
    def n(self) -> int:
        return self.observations.shape[1]

    def bottom(self) -> np.ndarray:
        return self.observations[self.hierarchy.m - self.hierarchy.m_k:]

    def window(self, end: int) -> np.ndarray:
        """Observations for periods 1..end."""
        return self.observations[:, :end]
