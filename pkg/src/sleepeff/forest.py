"""Random-forest regression: bagged CART trees with variance-reduction splits
and mean-decrease-in-impurity importance."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import EmptyInput, KTooLarge, ShapeError


@dataclass
class TreeNode:
    """Leaf when ``feature_index`` is None. Rows with
    ``x[feature_index] < threshold`` go left, the rest go right."""

    value: float
    n_samples: int
    impurity: float
    feature_index: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature_index is None

    def decrease(self) -> float:
        """Weighted variance reduction N*Var - (N_L*Var_L + N_R*Var_R)."""
        if self.is_leaf:
            return 0.0
        return (
            self.n_samples * self.impurity
            - self.left.n_samples * self.left.impurity
            - self.right.n_samples * self.right.impurity
        )

    def iter_nodes(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)


@dataclass
class ForestConfig:
    n_trees: int = 10
    mtry: Optional[int] = None  # None -> ceil(p / 3)
    min_samples_leaf: int = 1
    max_depth: Optional[int] = None
    seed: int = 0
    bootstrap: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")

    def resolve_mtry(self, n_features: int) -> int:
        mtry = self.mtry if self.mtry is not None else math.ceil(n_features / 3)
        if mtry > n_features:
            raise ValueError(f"mtry={mtry} exceeds the number of features ({n_features})")
        return mtry

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ForestConfig":
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown forest config keys: {sorted(unknown)}")
        return cls(**payload)


def _best_split(X, y, features, min_leaf):
    """Best (gain, feature, threshold) over ``features`` or None.

    Ties go to the lowest feature index, then the smallest threshold.
    """
    n = len(y)
    if n < 2 * min_leaf:
        return None
    yc = y - y.mean()
    total = yc.sum()
    sub = X[:, features]
    order = np.argsort(sub, axis=0, kind="stable")
    xs = np.take_along_axis(sub, order, axis=0)
    cs = np.cumsum(yc[order], axis=0)[:-1]
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    n_right = n - n_left
    gain = cs * cs / n_left + (total - cs) ** 2 / n_right - total * total / n
    valid = xs[1:] > xs[:-1]
    if min_leaf > 1:
        valid[: min_leaf - 1] = False
        valid[n - min_leaf:] = False
    if not valid.any():
        return None
    gain = np.where(valid, gain, -np.inf)
    # column-major argmax: first feature (ascending index), then first position
    flat = int(np.argmax(gain.T))
    col, pos = divmod(flat, n - 1)
    best = gain[pos, col]
    lo, hi = xs[pos, col], xs[pos + 1, col]
    threshold = (lo + hi) / 2.0
    if not lo < threshold:
        threshold = hi
    return float(best), int(features[col]), float(threshold)


def fit_tree(X, y, config: ForestConfig, rng=None) -> TreeNode:
    """Grow one CART regression tree on all rows of ``X``.

    ``rng`` (a Generator or seed) drives the per-split feature subsampling.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        raise EmptyInput("cannot fit a tree on zero rows")
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError(f"X shape {X.shape} does not match {len(y)} targets")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    p = X.shape[1]
    mtry = config.resolve_mtry(p)
    min_leaf = config.min_samples_leaf

    def make_node(idx):
        ys = y[idx]
        if np.all(ys == ys[0]):
            # exact constant; the float mean can be off by an ulp
            return TreeNode(value=float(ys[0]), n_samples=len(idx), impurity=0.0)
        return TreeNode(value=float(ys.mean()), n_samples=len(idx), impurity=float(ys.var()))

    root_idx = np.arange(len(y))
    root = make_node(root_idx)
    stack = [(root, root_idx, 0)]
    while stack:
        node, idx, depth = stack.pop()
        if node.impurity <= 0.0 or (config.max_depth is not None and depth >= config.max_depth):
            continue
        ys = y[idx]
        features = np.sort(rng.choice(p, size=mtry, replace=False))
        found = _best_split(X[idx], ys, features, min_leaf)
        if found is None:
            continue
        gain, feature, threshold = found
        if not gain > 0:
            continue
        go_left = X[idx, feature] < threshold
        left_idx, right_idx = idx[go_left], idx[~go_left]
        node.feature_index = feature
        node.threshold = threshold
        node.left = make_node(left_idx)
        node.right = make_node(right_idx)
        # right pushed first so the left subtree is grown first
        stack.append((node.right, right_idx, depth + 1))
        stack.append((node.left, left_idx, depth + 1))
    return root


def predict_tree(tree: TreeNode, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(len(X))
    stack = [(tree, np.arange(len(X)))]
    while stack:
        node, idx = stack.pop()
        if len(idx) == 0:
            continue
        if node.is_leaf:
            out[idx] = node.value
            continue
        go_left = X[idx, node.feature_index] < node.threshold
        stack.append((node.left, idx[go_left]))
        stack.append((node.right, idx[~go_left]))
    return out


@dataclass
class Forest:
    trees: list
    tree_seeds: list
    config: ForestConfig
    n_features: int
    feature_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.trees)


def tree_seeds(seed: int, n_trees: int) -> list[int]:
    """One 64-bit seed per tree, derived from (seed, tree index) only."""
    return [
        int(np.random.SeedSequence(seed, spawn_key=(i,)).generate_state(1, dtype=np.uint64)[0])
        for i in range(n_trees)
    ]


def _fit_one(X, y, config, seed):
    rng = np.random.default_rng(seed)
    n = len(y)
    if config.bootstrap:
        rows = rng.integers(0, n, size=n)
        return fit_tree(X[rows], y[rows], config, rng)
    return fit_tree(X, y, config, rng)


def fit_forest_arrays(X, y, config: ForestConfig, feature_names=None) -> Forest:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        raise EmptyInput("cannot fit a forest on zero rows")
    config.resolve_mtry(X.shape[1])
    seeds = tree_seeds(config.seed, config.n_trees)
    if config.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=config.n_jobs) as pool:
            trees = list(pool.map(lambda s: _fit_one(X, y, config, s), seeds))
    else:
        trees = [_fit_one(X, y, config, s) for s in seeds]
    return Forest(trees, seeds, config, X.shape[1], list(feature_names or []))


def fit_forest(table, config: ForestConfig) -> Forest:
    """Fit a forest on a :class:`~sleepeff.dataset.MergedTable`."""
    if len(table) == 0:
        raise EmptyInput("cannot fit a forest on an empty table")
    return fit_forest_arrays(table.features, table.target, config, table.schema.names)


def predict_forest_arrays(forest: Forest, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise ShapeError(f"forest expects {forest.n_features} features, got shape {X.shape}")
    total = np.zeros(len(X))
    for tree in forest.trees:
        total += predict_tree(tree, X)
    return total / len(forest.trees)


def predict_forest(forest: Forest, table) -> np.ndarray:
    return predict_forest_arrays(forest, table.features)


def feature_importance(forest: Forest) -> np.ndarray:
    """Normalized mean decrease in impurity; all zeros when no tree split."""
    total = np.zeros(forest.n_features)
    for tree in forest.trees:
        per_tree = np.zeros(forest.n_features)
        for node in tree.iter_nodes():
            if not node.is_leaf:
                per_tree[node.feature_index] += max(node.decrease(), 0.0)
        total += per_tree / tree.n_samples
    total /= len(forest.trees)
    s = total.sum()
    if s <= 0:
        return np.zeros(forest.n_features)
    return total / s


def top_k(importance, k: int, names=None) -> list[tuple[str, float]]:
    """The ``k`` most important features, descending; ties by ascending index."""
    importance = np.asarray(importance, dtype=np.float64)
    p = len(importance)
    if not 1 <= k <= p:
        raise KTooLarge(f"k={k} must lie in [1, {p}]")
    names = list(names) if names else [str(i) for i in range(p)]
    order = sorted(range(p), key=lambda i: (-importance[i], i))[:k]
    return [(names[i], float(importance[i])) for i in order]


def top_k_indices(importance, k: int) -> list[int]:
    importance = np.asarray(importance, dtype=np.float64)
    p = len(importance)
    if not 1 <= k <= p:
        raise KTooLarge(f"k={k} must lie in [1, {p}]")
    return sorted(range(p), key=lambda i: (-importance[i], i))[:k]


# ---------------------------------------------------------------------------
# serialization


def tree_to_records(tree: TreeNode) -> list[dict]:
    """Preorder node records."""
    out = []
    for node in tree.iter_nodes():
        rec = {"value": node.value, "n_samples": node.n_samples, "impurity": node.impurity}
        if not node.is_leaf:
            rec["feature_index"] = node.feature_index
            rec["threshold"] = node.threshold
        out.append(rec)
    return out


def tree_from_records(records: list[dict]) -> TreeNode:
    it = iter(records)

    def build():
        rec = next(it)
        node = TreeNode(rec["value"], rec["n_samples"], rec["impurity"])
        if "feature_index" in rec:
            node.feature_index = rec["feature_index"]
            node.threshold = rec["threshold"]
            node.left = build()
            node.right = build()
        return node

    return build()


def forest_to_dict(forest: Forest) -> dict:
    return {
        "config": forest.config.to_dict(),
        "n_features": forest.n_features,
        "feature_names": forest.feature_names,
        "tree_seeds": [str(s) for s in forest.tree_seeds],
        "trees": [tree_to_records(t) for t in forest.trees],
    }


def forest_from_dict(payload: dict) -> Forest:
    return Forest(
        trees=[tree_from_records(r) for r in payload["trees"]],
        tree_seeds=[int(s) for s in payload["tree_seeds"]],
        config=ForestConfig.from_dict(payload["config"]),
        n_features=payload["n_features"],
        feature_names=list(payload.get("feature_names", [])),
    )


def save_forest(path, forest: Forest) -> None:
    Path(path).write_text(json.dumps(forest_to_dict(forest)), encoding="utf-8")


def load_forest(path) -> Forest:
    with open(path, encoding="utf-8") as fh:
        return forest_from_dict(json.load(fh))
