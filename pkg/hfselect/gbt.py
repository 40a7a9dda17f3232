"""Gradient-boosted decision trees with a softmax objective.

Each round fits one regression tree per class on the softmax gradients
g = p - 1{y = c} and hessians h = p (1 - p). Splits are found by exact greedy
search over sorted feature values with the second-order gain

    0.5 * [GL^2 / (HL + lambda) + GR^2 / (HR + lambda) - G^2 / (H + lambda)] - gamma

and leaves take the value -G / (H + lambda), scaled by the learning rate.
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .datastructures import GbtConfig
from .error_handler import DimensionError, ModelError, ValidationError
from .logging_manager import get_context_logger, get_logger

logger = get_logger("gbt")

MODEL_FORMAT = "hfselect-gbt"
MODEL_VERSION = 1
HESSIAN_FLOOR = 1e-16
PROB_CLIP = 1e-15
# Smoothed count for classes absent from the training labels
ABSENT_CLASS_COUNT = 0.5


@dataclass(eq=False)
class Tree:
    """Flat array form of one regression tree. Leaves have feature == -1."""

    feature: np.ndarray
    threshold: np.ndarray
    gain: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_splits(self) -> int:
        return int(np.sum(self.feature >= 0))

    @property
    def depth(self) -> int:
        def walk(i: int) -> int:
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=int)
        rows = np.arange(X.shape[0])
        while True:
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                break
            idx = rows[internal]
            go_left = X[idx, feat[internal]] < self.threshold[node[internal]]
            node[idx] = np.where(go_left, self.left[node[internal]], self.right[node[internal]])
        return self.value[node]

    def to_dict(self, i: int = 0) -> Dict[str, Any]:
        if self.feature[i] < 0:
            return {"leaf": float(self.value[i])}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "gain": float(self.gain[i]),
            "left": self.to_dict(int(self.left[i])),
            "right": self.to_dict(int(self.right[i])),
        }

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "Tree":
        builder = _TreeBuilder()

        def add(rec: Dict[str, Any]) -> int:
            if "leaf" in rec:
                return builder.leaf(float(rec["leaf"]))
            i = builder.split(int(rec["feature"]), float(rec["threshold"]), float(rec["gain"]))
            builder.left[i] = add(rec["left"])
            builder.right[i] = add(rec["right"])
            return i

        add(record)
        return builder.build()


class _TreeBuilder:
    def __init__(self):
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.gain: List[float] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.value: List[float] = []

    def _add(self, feature: int, threshold: float, gain: float, value: float) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.gain.append(gain)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.feature) - 1

    def leaf(self, value: float) -> int:
        return self._add(-1, 0.0, 0.0, value)

    def split(self, feature: int, threshold: float, gain: float) -> int:
        return self._add(feature, threshold, gain, 0.0)

    def build(self) -> Tree:
        return Tree(
            feature=np.array(self.feature, dtype=int),
            threshold=np.array(self.threshold, dtype=float),
            gain=np.array(self.gain, dtype=float),
            left=np.array(self.left, dtype=int),
            right=np.array(self.right, dtype=int),
            value=np.array(self.value, dtype=float),
        )


def _softmax(margin: np.ndarray) -> np.ndarray:
    z = margin - margin.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def mlogloss(proba: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(proba[np.arange(len(labels)), labels], PROB_CLIP, 1.0)
    return float(-np.mean(np.log(p)))


class _SplitFinder:
    """Exact greedy split search over presorted columns."""

    def __init__(self, X: np.ndarray, cfg: GbtConfig):
        self.X = X
        self.cfg = cfg
        self.sorted_idx = np.argsort(X, axis=0, kind="stable")  # N x d

    def best_split(self, mask: np.ndarray, cols: np.ndarray, g: np.ndarray,
                   h: np.ndarray) -> Optional[Tuple[int, float, float]]:
        n_node = int(mask.sum())
        if n_node < 2:
            return None
        cfg = self.cfg
        sidx = self.sorted_idx[:, cols]
        in_node = mask[sidx]
        order = sidx.T[in_node.T].reshape(len(cols), n_node)  # per feature, node rows sorted
        xs = self.X[order, cols[:, None]]
        GL = np.cumsum(g[order], axis=1)[:, :-1]
        HL = np.cumsum(h[order], axis=1)[:, :-1]
        G, H = g[mask].sum(), h[mask].sum()
        GR, HR = G - GL, H - HL

        lam = cfg.lambda_reg
        gain = 0.5 * (GL ** 2 / (HL + lam) + GR ** 2 / (HR + lam) - G ** 2 / (H + lam)) - cfg.gamma
        valid = (xs[:, :-1] < xs[:, 1:]) & (HL >= cfg.min_child_weight) & (HR >= cfg.min_child_weight)
        gain = np.where(valid, gain, -np.inf)
        flat = int(np.argmax(gain))
        fi, pos = divmod(flat, n_node - 1)
        best = gain[fi, pos]
        if not np.isfinite(best) or best <= 0.0:
            return None
        lo, hi = xs[fi, pos], xs[fi, pos + 1]
        threshold = lo + (hi - lo) / 2.0
        if not lo < threshold:
            threshold = hi
        return int(cols[fi]), float(threshold), float(best)


def _grow_tree(finder: _SplitFinder, rows: np.ndarray, cols: np.ndarray, g: np.ndarray,
               h: np.ndarray, cfg: GbtConfig) -> Tree:
    builder = _TreeBuilder()
    X = finder.X

    def grow(mask: np.ndarray, depth: int) -> int:
        split = None
        if depth < cfg.max_depth:
            split = finder.best_split(mask, cols, g, h)
        if split is None:
            G, H = g[mask].sum(), h[mask].sum()
            return builder.leaf(-G / (H + cfg.lambda_reg) * cfg.eta)
        feature, threshold, gain = split
        i = builder.split(feature, threshold, gain)
        goes_left = X[:, feature] < threshold
        builder.left[i] = grow(mask & goes_left, depth + 1)
        builder.right[i] = grow(mask & ~goes_left, depth + 1)
        return i

    mask = np.zeros(X.shape[0], dtype=bool)
    mask[rows] = True
    grow(mask, 0)
    return builder.build()


@dataclass(eq=False)
class GbtModel:
    """Trained multiclass ensemble: trees[round][class] plus per-class base scores."""

    config: GbtConfig
    n_features: int
    base_score: np.ndarray
    trees: List[List[Tree]] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    eval_loss: List[float] = field(default_factory=list)
    feature_names: Optional[List[str]] = None

    @property
    def n_classes(self) -> int:
        return len(self.base_score)

    @property
    def n_rounds(self) -> int:
        return len(self.trees)

    def margin(self, X: np.ndarray) -> np.ndarray:
        X = self._check_width(X)
        F = np.tile(self.base_score, (X.shape[0], 1))
        for round_trees in self.trees:
            for c, tree in enumerate(round_trees):
                F[:, c] += tree.predict(X)
        return F

    def _check_width(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise DimensionError(f"Row width {X.shape[1]} does not match model width {self.n_features}")
        return X

    def predict_proba_batch(self, X: np.ndarray) -> np.ndarray:
        return _softmax(self.margin(X))

    def predict_proba(self, row: np.ndarray) -> np.ndarray:
        """Class probabilities for one row."""
        row = np.asarray(row, dtype=float)
        if row.ndim != 1:
            raise DimensionError(f"predict_proba takes one row, got shape {row.shape}")
        return self.predict_proba_batch(row)[0]

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Most probable class per row; ties go to the lowest class index."""
        return np.argmax(self.predict_proba_batch(X), axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "config": asdict(self.config),
            "n_features": self.n_features,
            "feature_names": self.feature_names,
            "base_score": [float(v) for v in self.base_score],
            "train_loss": [float(v) for v in self.train_loss],
            "eval_loss": [float(v) for v in self.eval_loss],
            "trees": [[tree.to_dict() for tree in round_trees] for round_trees in self.trees],
        }

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "GbtModel":
        if record.get("format") != MODEL_FORMAT:
            raise ModelError(f"Not a serialized model (format={record.get('format')!r})")
        if record.get("version") != MODEL_VERSION:
            raise ModelError(f"Unsupported model version {record.get('version')}, expected {MODEL_VERSION}")
        return cls(
            config=GbtConfig(**record["config"]),
            n_features=int(record["n_features"]),
            base_score=np.array(record["base_score"], dtype=float),
            trees=[[Tree.from_dict(t) for t in round_trees] for round_trees in record["trees"]],
            train_loss=list(record.get("train_loss", [])),
            eval_loss=list(record.get("eval_loss", [])),
            feature_names=record.get("feature_names"),
        )

    def save(self, path: Union[str, Path]):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GbtModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _validate(rows: np.ndarray, labels: np.ndarray, cfg: GbtConfig) -> Tuple[np.ndarray, np.ndarray]:
    if not 0.0 < cfg.eta <= 1.0:
        raise ValidationError(f"eta must be in (0, 1], got {cfg.eta}")
    if not (0.0 < cfg.subsample <= 1.0 and 0.0 < cfg.colsample_bytree <= 1.0):
        raise ValidationError("subsample and colsample_bytree must be in (0, 1]")
    if cfg.n_classes < 2:
        raise ValidationError(f"n_classes must be >= 2, got {cfg.n_classes}")
    if cfg.max_depth < 0 or cfg.n_rounds < 0:
        raise ValidationError("max_depth and n_rounds must be non-negative")

    X = np.asarray(rows, dtype=float)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValidationError(f"Training rows must be a non-empty N x d matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("Training rows contain non-finite values")
    if y.shape != (X.shape[0],):
        raise DimensionError(f"{len(y)} labels for {X.shape[0]} rows")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValidationError("Labels must be class indices")
    y = y.astype(int)
    if y.min() < 0 or y.max() >= cfg.n_classes:
        raise ValidationError(f"Labels must lie in [0, {cfg.n_classes})")
    if X.shape[0] < cfg.n_classes:
        raise ValidationError(f"Need at least {cfg.n_classes} rows, got {X.shape[0]}")
    if len(np.unique(y)) < 2:
        raise ValidationError("All training labels belong to one class")
    return X, y


def train(rows: np.ndarray, labels: Sequence[int], cfg: Optional[GbtConfig] = None,
          eval_set: Optional[Tuple[np.ndarray, Sequence[int]]] = None,
          feature_names: Optional[List[str]] = None) -> GbtModel:
    """Train a softmax boosted-tree classifier.

    Args:
        rows: N x d training matrix
        labels: class indices in [0, n_classes)
        cfg: hyperparameters (defaults to GbtConfig())
        eval_set: optional (rows, labels) monitored for early stopping
        feature_names: optional column names kept with the model

    Returns:
        GbtModel; the result depends only on the multiset of training rows.
    """
    cfg = cfg or GbtConfig()
    X, y = _validate(rows, labels, cfg)
    ctx = get_context_logger("gbt")
    ctx.log_operation_start("train", f"{X.shape[0]} rows, {X.shape[1]} features, {cfg.n_rounds} rounds")

    keys = [y] + [X[:, j] for j in reversed(range(X.shape[1]))]
    order = np.lexsort(keys)
    X, y = X[order], y[order]

    N, d = X.shape
    K = cfg.n_classes
    counts = np.bincount(y, minlength=K).astype(float)
    absent = counts == 0
    if absent.any():
        logger.warning(f"Classes {np.flatnonzero(absent).tolist()} absent from training labels", key="absent_class")
        counts[absent] = ABSENT_CLASS_COUNT
    base_score = np.log(counts / counts.sum())
    model = GbtModel(config=cfg, n_features=d, base_score=base_score, feature_names=feature_names)

    eval_X = eval_y = None
    if eval_set is not None:
        eval_X = model._check_width(eval_set[0])
        eval_y = np.asarray(eval_set[1], dtype=int)
        eval_F = np.tile(base_score, (eval_X.shape[0], 1))

    onehot = np.eye(K)[y]
    F = np.tile(base_score, (N, 1))
    rng = np.random.default_rng(cfg.seed)
    finder = _SplitFinder(X, cfg)
    all_rows = np.arange(N)
    all_cols = np.arange(d)
    n_sub = max(1, int(round(cfg.subsample * N)))
    n_col = max(1, int(round(cfg.colsample_bytree * d)))
    best_loss, best_round, stale = np.inf, 0, 0

    for round_no in range(cfg.n_rounds):
        P = _softmax(F)
        grad = P - onehot
        hess = np.maximum(P * (1.0 - P), HESSIAN_FLOOR)
        rows_used = all_rows if cfg.subsample >= 1.0 else np.sort(rng.choice(N, size=n_sub, replace=False))

        round_trees = []
        for c in range(K):
            cols = all_cols if cfg.colsample_bytree >= 1.0 else np.sort(rng.choice(d, size=n_col, replace=False))
            tree = _grow_tree(finder, rows_used, cols, grad[:, c], hess[:, c], cfg)
            round_trees.append(tree)
        for c, tree in enumerate(round_trees):
            F[:, c] += tree.predict(X)
        model.trees.append(round_trees)
        model.train_loss.append(mlogloss(_softmax(F), y))

        if eval_X is not None:
            for c, tree in enumerate(round_trees):
                eval_F[:, c] += tree.predict(eval_X)
            loss = mlogloss(_softmax(eval_F), eval_y)
            model.eval_loss.append(loss)
            if cfg.early_stopping_rounds:
                if loss < best_loss:
                    best_loss, best_round, stale = loss, round_no + 1, 0
                else:
                    stale += 1
                    if stale >= cfg.early_stopping_rounds:
                        logger.info(f"Early stop at round {round_no + 1}; best round {best_round}",
                                    key="early_stop")
                        model.trees = model.trees[:best_round]
                        model.train_loss = model.train_loss[:best_round]
                        model.eval_loss = model.eval_loss[:best_round]
                        break

    final = model.train_loss[-1] if model.train_loss else mlogloss(_softmax(F), y)
    ctx.log_operation_end("train", True, f"{model.n_rounds} rounds, train mlogloss {final:.4f}")
    return model


def feature_importance(model: GbtModel, names: Optional[List[str]] = None) -> List[Tuple[Union[int, str], int]]:
    """Split counts per feature, descending, ties by feature index. Unused features are omitted."""
    counts = np.zeros(model.n_features, dtype=int)
    for round_trees in model.trees:
        for tree in round_trees:
            used = tree.feature[tree.feature >= 0]
            counts += np.bincount(used, minlength=model.n_features)
    ranked = sorted((i for i in range(model.n_features) if counts[i] > 0), key=lambda i: (-counts[i], i))
    labels = names or model.feature_names
    return [(labels[i] if labels else i, int(counts[i])) for i in ranked]
