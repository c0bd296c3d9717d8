"""Regression trees and tree ensembles: CART, random forest, extremely randomized trees.

Splits minimize the summed within-child sum of squares. Rows with
``x[feature] <= threshold`` go to the left child. Split search runs in the
compiled kernel when it is built (see :mod:`lasermon._kernels`).
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ValidationError

FORMAT_VERSION = 1
SPLITTERS = ("best", "random_threshold")
FEATURE_SUBSETS = ("all", "sqrt", "third")


@dataclass(frozen=True)
class TreeConfig:
    max_depth: int | None = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    splitter: str = "best"
    feature_subset: str = "all"
    seed: int = 0

    def __post_init__(self):
        if self.min_samples_split < 2 or self.min_samples_leaf < 1:
            raise ValidationError("min_samples_split >= 2 and min_samples_leaf >= 1 required")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValidationError("max_depth must be >= 0")
        if self.splitter not in SPLITTERS:
            raise ValidationError(f"unknown splitter {self.splitter!r}")
        if self.feature_subset not in FEATURE_SUBSETS:
            raise ValidationError(f"unknown feature_subset {self.feature_subset!r}")


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    bootstrap: bool = False
    tree: TreeConfig = field(default_factory=TreeConfig)
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValidationError("n_trees must be >= 1")


def random_forest_config(n_trees: int = 100, seed: int = 0, **tree_kw) -> ForestConfig:
    return ForestConfig(n_trees, True, TreeConfig(splitter="best", feature_subset="third", **tree_kw), seed)


def extra_trees_config(n_trees: int = 100, seed: int = 0, **tree_kw) -> ForestConfig:
    return ForestConfig(n_trees, False, TreeConfig(splitter="random_threshold", **tree_kw), seed)


@dataclass
class Tree:
    """Flattened binary tree; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    n_features: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.feature < 0))

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())


@dataclass
class Ensemble:
    trees: list[Tree]
    kind: str  # "dt", "rf" or "et"
    config: ForestConfig | TreeConfig
    n_features: int


def _validate_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
    y = np.ascontiguousarray(np.asarray(y, dtype=float).ravel())
    if X.shape[0] < 1 or len(y) < 1:
        raise ValidationError("cannot fit a tree on zero rows")
    if X.shape[0] != len(y):
        raise ValidationError(f"{X.shape[0]} rows vs {len(y)} targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValidationError("non-finite training data")
    return X, y


def _subset_size(kind: str, d: int) -> int:
    if kind == "sqrt":
        return max(1, math.ceil(math.sqrt(d)))
    if kind == "third":
        return max(1, math.ceil(d / 3))
    return d


def _grow(X: np.ndarray, y: np.ndarray, rows: np.ndarray, config: TreeConfig,
          rng: np.random.Generator) -> Tree:
    d = X.shape[1]
    all_features = np.arange(d, dtype=np.intp)
    m = _subset_size(config.feature_subset, d)
    feature, threshold, left, right, value, count = [], [], [], [], [], []

    def new_node(idx: np.ndarray) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        ys = y[idx]
        value.append(float(ys[0]) if np.all(ys == ys[0]) else float(np.mean(ys)))
        count.append(len(idx))
        return len(feature) - 1

    root = new_node(rows)
    stack = [(root, rows, 0)]
    while stack:
        node, idx, depth = stack.pop()
        n = len(idx)
        if n < config.min_samples_split:
            continue
        if config.max_depth is not None and depth >= config.max_depth:
            continue
        ys = y[idx]
        if np.all(ys == ys[0]):
            continue
        if m < d:
            feats = np.sort(rng.choice(d, size=m, replace=False)).astype(np.intp)
        else:
            feats = all_features
        if config.splitter == "best":
            f, thr, _ = _kernels.best_split(X, y, idx, feats, config.min_samples_leaf)
        else:
            u = rng.random(len(feats))
            f, thr, _ = _kernels.random_split(X, y, idx, feats, u, config.min_samples_leaf)
        if f < 0:
            continue
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        lc, rc = new_node(li), new_node(ri)
        feature[node], threshold[node], left[node], right[node] = int(f), float(thr), lc, rc
        stack.append((rc, ri, depth + 1))
        stack.append((lc, li, depth + 1))

    return Tree(
        np.asarray(feature, dtype=np.intp),
        np.asarray(threshold, dtype=float),
        np.asarray(left, dtype=np.intp),
        np.asarray(right, dtype=np.intp),
        np.asarray(value, dtype=float),
        np.asarray(count, dtype=np.intp),
        d,
    )


def fit_tree(X, y, config: TreeConfig = TreeConfig(), rng: np.random.Generator | None = None) -> Tree:
    X, y = _validate_xy(X, y)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    return _grow(X, y, np.arange(len(y), dtype=np.intp), config, rng)


def _tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & ((1 << 64) - 1), tree_index]))


def _fit_ensemble(X, y, config: ForestConfig, kind: str) -> Ensemble:
    X, y = _validate_xy(X, y)
    n = len(y)

    def one(t: int) -> Tree:
        rng = _tree_rng(config.seed, t)
        if config.bootstrap:
            rows = np.sort(rng.integers(0, n, size=n)).astype(np.intp)
        else:
            rows = np.arange(n, dtype=np.intp)
        return _grow(X, y, rows, config.tree, rng)

    if config.n_jobs > 1:
        with ThreadPoolExecutor(config.n_jobs) as pool:
            trees = list(pool.map(one, range(config.n_trees)))
    else:
        trees = [one(t) for t in range(config.n_trees)]
    return Ensemble(trees, kind, config, X.shape[1])


def fit_decision_tree(X, y, config: TreeConfig = TreeConfig()) -> Ensemble:
    tree = fit_tree(X, y, config)
    return Ensemble([tree], "dt", config, tree.n_features)


def fit_random_forest(X, y, config: ForestConfig | None = None) -> Ensemble:
    """Bootstrap-resampled CART trees (``ceil(d/3)`` candidate features per node by default)."""
    return _fit_ensemble(X, y, config or random_forest_config(), "rf")


def fit_extra_trees(X, y, config: ForestConfig | None = None) -> Ensemble:
    """Full-sample trees with one uniform random cut-point per candidate feature.

    The bootstrap, splitter and feature-subset fields of ``config`` are
    overridden: every tree sees all rows and all features.
    """
    config = config or extra_trees_config()
    config = replace(
        config,
        bootstrap=False,
        tree=replace(config.tree, splitter="random_threshold", feature_subset="all"),
    )
    return _fit_ensemble(X, y, config, "et")


def predict_tree(tree: Tree, X) -> np.ndarray:
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
    if X.shape[1] != tree.n_features:
        raise ValidationError(f"expected {tree.n_features} features, got {X.shape[1]}")
    return _kernels.predict_tree(tree.feature, tree.threshold, tree.left, tree.right, tree.value, X)


def predict(model: Ensemble | Tree, X):
    """Mean of the per-tree leaf values; a 1-d ``X`` returns a float."""
    single = np.asarray(X).ndim == 1
    if isinstance(model, Tree):
        out = predict_tree(model, X)
    else:
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
        if X.shape[1] != model.n_features:
            raise ValidationError(f"expected {model.n_features} features, got {X.shape[1]}")
        total = np.zeros(X.shape[0])
        for tree in model.trees:
            total += predict_tree(tree, X)
        out = total / len(model.trees)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# persistence


def _tree_to_dict(tree: Tree) -> dict:
    return {
        "feature": tree.feature.tolist(),
        "threshold": tree.threshold.tolist(),
        "left": tree.left.tolist(),
        "right": tree.right.tolist(),
        "value": tree.value.tolist(),
        "n_samples": tree.n_samples.tolist(),
    }


def _tree_from_dict(doc: dict, n_features: int) -> Tree:
    return Tree(
        np.asarray(doc["feature"], dtype=np.intp),
        np.asarray(doc["threshold"], dtype=float),
        np.asarray(doc["left"], dtype=np.intp),
        np.asarray(doc["right"], dtype=np.intp),
        np.asarray(doc["value"], dtype=float),
        np.asarray(doc["n_samples"], dtype=np.intp),
        n_features,
    )


def ensemble_to_dict(model: Ensemble) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "n_features": model.n_features,
        "config": asdict(model.config),
        "trees": [_tree_to_dict(t) for t in model.trees],
    }


def ensemble_from_dict(doc: dict) -> Ensemble:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported ensemble format {doc.get('format_version')!r}")
    cfg = doc["config"]
    if "n_trees" in cfg:
        config = ForestConfig(**{**cfg, "tree": TreeConfig(**cfg["tree"])})
    else:
        config = TreeConfig(**cfg)
    trees = [_tree_from_dict(t, doc["n_features"]) for t in doc["trees"]]
    return Ensemble(trees, doc["kind"], config, doc["n_features"])


def save_ensemble(model: Ensemble, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ensemble_to_dict(model)), encoding="utf-8")


def load_ensemble(path: str | Path) -> Ensemble:
    return ensemble_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_model(kind: str, X, y, n_trees: int = 100, seed: int = 0, n_jobs: int = 1) -> Ensemble:
    """Fit one of the lightweight models by short name: ``dt``, ``rf`` or ``et``."""
    if kind == "dt":
        return fit_decision_tree(X, y, TreeConfig(seed=seed))
    if kind == "rf":
        return fit_random_forest(X, y, replace(random_forest_config(n_trees, seed), n_jobs=n_jobs))
    if kind == "et":
        return fit_extra_trees(X, y, replace(extra_trees_config(n_trees, seed), n_jobs=n_jobs))
    raise ValidationError(f"unknown model kind {kind!r}")


LIGHT_MODELS: Sequence[str] = ("dt", "rf", "et")
