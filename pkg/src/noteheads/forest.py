"""Random forest of CART trees for the proposal filter.

Trees are stored as flat node arrays so that prediction walks all samples
through a tree level by level. A node with ``feature == -1`` is a leaf whose
``value`` is the fraction of positive training rows that reached it.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

VERSION = "RFv1"


class ForestFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 300
    max_depth: int = 8
    min_samples_leaf: int = 3
    features_per_split: int | None = None  # None: ceil(sqrt(n_features))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_trees, max_depth and min_samples_leaf must be >= 1")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError("features_per_split must be >= 1")

    def split_features(self, n_features: int) -> int:
        k = self.features_per_split or math.ceil(math.sqrt(n_features))
        if k > n_features:
            raise ValueError(f"features_per_split {k} exceeds {n_features} features")
        return k


@dataclass
class Tree:
    feature: np.ndarray  # int, -1 for leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # positive fraction at the node
    support: np.ndarray  # training rows reaching the node

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.feature), dtype=np.int64)
        for i in range(len(self.feature)):  # children always follow parents
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    @property
    def n_splits(self) -> int:
        return int((self.feature >= 0).sum())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                return node
            go_left = X[rows, np.where(active, feat, 0)] <= self.threshold[node]
            node = np.where(active, np.where(go_left, self.left[node], self.right[node]), node)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "support": self.support.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Tree":
        ints = {k: np.asarray(data[k], dtype=np.int64) for k in ("feature", "left", "right", "support")}
        floats = {k: np.asarray(data[k], dtype=np.float64) for k in ("threshold", "value")}
        return cls(**ints, **floats)


def _best_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """Lowest weighted Gini over midpoints of ``x``. Returns (score, threshold) or None."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = len(xs)
    # candidate cut after position i (left holds i+1 rows)
    cut = np.flatnonzero(xs[:-1] < xs[1:])
    cut = cut[(cut + 1 >= min_leaf) & (n - cut - 1 >= min_leaf)]
    if len(cut) == 0:
        return None
    pos_left = np.cumsum(ys)[cut]
    n_left = cut + 1.0
    n_right = n - n_left
    pos_right = ys.sum() - pos_left
    gini_left = 2 * pos_left * (n_left - pos_left) / n_left
    gini_right = 2 * pos_right * (n_right - pos_right) / n_right
    score = (gini_left + gini_right) / n
    best = int(np.argmin(score))
    lo, hi = xs[cut[best]], xs[cut[best] + 1]
    mid = lo + (hi - lo) / 2
    if not lo <= mid < hi:
        mid = lo
    return float(score[best]), float(mid)


def fit_tree(X: np.ndarray, y: np.ndarray, rows: np.ndarray, config: ForestConfig, rng: np.random.Generator) -> Tree:
    """Grow one CART tree on ``X[rows]`` (rows may repeat)."""
    k = config.split_features(X.shape[1])
    feature, threshold, left, right, value, support = [], [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        support.append(len(idx))
        return len(feature) - 1

    stack = [(new_node(rows), rows, 0)]
    while stack:
        node, idx, depth = stack.pop()
        pos = y[idx].sum()
        if depth >= config.max_depth or pos == 0 or pos == len(idx) or len(idx) < 2 * config.min_samples_leaf:
            continue
        best = None
        tried = 0
        # like common CART implementations, constant features do not use up the budget
        for f in rng.permutation(X.shape[1]):
            col = X[idx, f]
            if col.min() == col.max():
                continue
            tried += 1
            found = _best_split(col, y[idx], config.min_samples_leaf)
            if found is not None and (best is None or found[0] < best[0]):
                best = (found[0], found[1], int(f))
            if tried >= k:
                break
        if best is None:
            continue
        _, thr, f = best
        mask = X[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        li, ri = idx[mask], idx[~mask]
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=np.float64),
        np.array(support, dtype=np.int64),
    )


def _check_features(X, n_features=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"expected a 2-d feature matrix, got shape {X.shape}")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature values")
    return X


class RandomForest:
    def __init__(self, trees: list[Tree], n_features: int, config: ForestConfig = ForestConfig()):
        self.trees = list(trees)
        self.n_features = n_features
        self.config = config
        self.oob_score = None
        self.degenerate = False

    @classmethod
    def fit(cls, X, y, config: ForestConfig = ForestConfig()) -> "RandomForest":
        X = _check_features(X)
        y = np.asarray(y).reshape(-1)
        if len(y) != len(X):
            raise ValueError("features and labels differ in length")
        if len(y) == 0:
            raise ValueError("no training rows")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        y = y.astype(np.float64)
        n = len(y)
        trees = []
        oob_sum = np.zeros(n)
        oob_count = np.zeros(n)
        for child in np.random.SeedSequence(config.seed).spawn(config.n_trees):
            rng = np.random.default_rng(child)
            rows = rng.integers(0, n, n) if config.bootstrap else np.arange(n)
            tree = fit_tree(X, y, rows, config, rng)
            trees.append(tree)
            if config.bootstrap:
                out = np.ones(n, dtype=bool)
                out[rows] = False
                oob_sum[out] += tree.predict_proba(X[out])
                oob_count[out] += 1
        forest = cls(trees, X.shape[1], config)
        forest.degenerate = bool(y.min() == y.max())
        if forest.degenerate:
            log.warning("all %d training labels are %d; the forest is constant", n, int(y[0]))
        seen = oob_count > 0
        if seen.any():
            forest.oob_score = float(np.mean((oob_sum[seen] / oob_count[seen] >= 0.5) == (y[seen] == 1)))
        return forest

    def predict_proba(self, X) -> np.ndarray:
        """Mean leaf fraction over trees, one probability per row."""
        X = _check_features(X, self.n_features)
        total = np.zeros(len(X))
        for tree in self.trees:
            total += tree.predict_proba(X)
        return total / len(self.trees)

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(np.int64)

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": VERSION,
            "n_features": self.n_features,
            "config": asdict(self.config),
            "oob_score": self.oob_score,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RandomForest":
        if data.get("version") != VERSION:
            raise ForestFormatError(f"unsupported version {data.get('version')!r}, expected {VERSION}")
        try:
            config = ForestConfig(**data["config"])
            n_features = int(data["n_features"])
            trees = [Tree.from_dict(t) for t in data["trees"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ForestFormatError(f"malformed forest: {exc}") from None
        if not trees:
            raise ForestFormatError("forest has no trees")
        for i, tree in enumerate(trees):
            _validate_tree(tree, i, n_features, config)
        forest = cls(trees, n_features, config)
        forest.oob_score = data.get("oob_score")
        return forest

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RandomForest":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ForestFormatError(f"{path}: not JSON ({exc})") from None
        return cls.from_dict(data)


def _validate_tree(tree: Tree, index: int, n_features: int, config: ForestConfig) -> None:
    n = len(tree.feature)
    arrays = (tree.threshold, tree.left, tree.right, tree.value, tree.support)
    if n == 0 or any(len(a) != n for a in arrays):
        raise ForestFormatError(f"tree {index}: empty or ragged node arrays")
    internal = tree.feature >= 0
    if np.any(tree.feature >= n_features) or np.any(tree.feature < -1):
        raise ForestFormatError(f"tree {index}: feature index out of range")
    for child in (tree.left, tree.right):
        if np.any(child[internal] <= np.flatnonzero(internal)) or np.any(child[internal] >= n):
            raise ForestFormatError(f"tree {index}: bad child pointer")
    if np.any((tree.value < 0) | (tree.value > 1)) or not np.all(np.isfinite(tree.threshold)):
        raise ForestFormatError(f"tree {index}: values out of range")
    if tree.depth > config.max_depth:
        raise ForestFormatError(f"tree {index}: depth {tree.depth} exceeds max_depth {config.max_depth}")
    if np.any(tree.support[~internal] < config.min_samples_leaf) and n > 1:
        raise ForestFormatError(f"tree {index}: leaf below min_samples_leaf")
