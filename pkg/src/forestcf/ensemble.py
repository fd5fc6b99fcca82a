"""Randomized tree ensembles trained from scratch with reproducible seeding.

The trainer is deliberately self-contained rather than delegated to an
external library: the retraining experiments need (a) per-tree randomness
derived from independent substreams of one seed, so that tree i depends only
on (seed, i), and (b) fully specified tie-breaking, so that two runs with the
same seed produce bit-identical forests on any platform.

Trees are grown CART-style: Gini impurity, candidate thresholds at midpoints
between consecutive distinct sorted values, a fresh uniform random subset of
features at every node, bootstrap resampling of the training set per tree.
Ties between equal-impurity splits go to the lowest feature index, then the
lowest threshold; leaf-class ties go to class 0.  Routing is ``value <=
threshold goes left``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from forestcf._validation import check_matrix, check_binary_labels

__all__ = [
    "Tree",
    "ForestConfig",
    "ForestClassifier",
    "StumpEnsemble",
    "train_forest",
    "train_stump_ensemble",
    "serialize_forest",
    "deserialize_forest",
    "ForestFormatError",
]

_LEAF = -1
_GINI_TOL = 1e-12


class ForestFormatError(ValueError):
    """A serialized forest file is malformed or from an unknown version."""


class Tree:
    """A single decision tree as flat node arrays.

    ``feature[i] == -1`` marks a leaf; internal nodes route ``x[feature] <=
    threshold`` to ``left`` and everything else to ``right``.
    """

    __slots__ = ("feature", "threshold", "left", "right", "leaf_class", "n_node_samples")

    def __init__(self, feature, threshold, left, right, leaf_class, n_node_samples):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.leaf_class = np.asarray(leaf_class, dtype=np.int64)
        self.n_node_samples = np.asarray(n_node_samples, dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of X."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        idx = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            feat = self.feature[idx]
            internal = feat >= 0
            if not internal.any():
                return idx
            rows = np.nonzero(internal)[0]
            node = idx[rows]
            go_left = X[rows, feat[rows]] <= self.threshold[node]
            idx[rows] = np.where(go_left, self.left[node], self.right[node])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_class[self.apply(X)]

    def depth(self) -> int:
        def walk(i: int) -> int:
            if self.feature[i] == _LEAF:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def thresholds_on(self, j: int) -> np.ndarray:
        """Sorted distinct thresholds splitting on feature j."""
        mask = self.feature == j
        return np.unique(self.threshold[mask])

    def leaf_boxes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Axis-aligned cells (lo, hi] per leaf together with leaf classes.

        Returns (lo, hi, cls) with lo/hi of shape (n_leaves, d_max_feature+1
        padded by the caller); here d is inferred as max split feature + 1,
        so callers should pass through :meth:`leaf_boxes_d`.
        """
        d = int(self.feature.max()) + 1 if (self.feature >= 0).any() else 1
        return self.leaf_boxes_d(d)

    def leaf_boxes_d(self, d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        los, his, classes = [], [], []

        def walk(i: int, lo: np.ndarray, hi: np.ndarray) -> None:
            if self.feature[i] == _LEAF:
                los.append(lo.copy())
                his.append(hi.copy())
                classes.append(int(self.leaf_class[i]))
                return
            j, t = int(self.feature[i]), float(self.threshold[i])
            saved = hi[j]
            hi[j] = min(hi[j], t)
            walk(int(self.left[i]), lo, hi)
            hi[j] = saved
            saved = lo[j]
            lo[j] = max(lo[j], t)
            walk(int(self.right[i]), lo, hi)
            lo[j] = saved

        walk(0, np.full(d, -np.inf), np.full(d, np.inf))
        return np.array(los), np.array(his), np.array(classes)


def _leaf_label(y: np.ndarray) -> int:
    ones = int(y.sum())
    return 1 if ones * 2 > y.size else 0


def _best_split(X, y, feats, min_leaf):
    """Lowest-weighted-Gini split over the given features, or None.

    Ties resolve to the lowest feature index (``feats`` must be sorted) and
    then the lowest threshold (candidates are scanned in ascending order).
    """
    n = y.size
    best_score = np.inf
    best = None
    for j in feats:
        v = X[:, j]
        order = np.argsort(v, kind="stable")
        sv = v[order]
        sy = y[order]
        pos = np.nonzero(sv[1:] != sv[:-1])[0] + 1
        if min_leaf > 1:
            pos = pos[(pos >= min_leaf) & (pos <= n - min_leaf)]
        if pos.size == 0:
            continue
        c1 = np.cumsum(sy)
        n1_left = c1[pos - 1]
        n_left = pos.astype(float)
        n_right = n - n_left
        n1_right = c1[-1] - n1_left
        gini_left = 1.0 - (n1_left / n_left) ** 2 - ((n_left - n1_left) / n_left) ** 2
        gini_right = 1.0 - (n1_right / n_right) ** 2 - ((n_right - n1_right) / n_right) ** 2
        weighted = (n_left * gini_left + n_right * gini_right) / n
        i = int(np.argmin(weighted))  # first occurrence = lowest threshold
        if weighted[i] < best_score - _GINI_TOL:
            best_score = weighted[i]
            best = (j, 0.5 * (sv[pos[i] - 1] + sv[pos[i]]), best_score)
    return best


def _grow_tree(X, y, rng, max_depth, mtry, min_leaf) -> Tree:
    feature, threshold, left, right, leaf_class, counts = [], [], [], [], [], []
    d = X.shape[1]

    def new_node() -> int:
        feature.append(_LEAF)
        threshold.append(0.0)
        left.append(_LEAF)
        right.append(_LEAF)
        leaf_class.append(0)
        counts.append(0)
        return len(feature) - 1

    def build(idx: np.ndarray, depth: int) -> int:
        node = new_node()
        yn = y[idx]
        counts[node] = idx.size
        ones = int(yn.sum())
        pure = ones == 0 or ones == idx.size
        if depth >= max_depth or pure or idx.size < 2 * min_leaf:
            leaf_class[node] = _leaf_label(yn)
            return node
        feats = np.sort(rng.choice(d, size=min(mtry, d), replace=False))
        parent_gini = 1.0 - (ones / idx.size) ** 2 - (1.0 - ones / idx.size) ** 2
        split = _best_split(X[idx], yn, feats, min_leaf)
        if split is None or split[2] >= parent_gini - _GINI_TOL:
            leaf_class[node] = _leaf_label(yn)
            return node
        j, t, _ = split
        feature[node] = j
        threshold[node] = t
        go_left = X[idx, j] <= t
        left[node] = build(idx[go_left], depth + 1)
        right[node] = build(idx[~go_left], depth + 1)
        return node

    build(np.arange(X.shape[0]), 0)
    return Tree(feature, threshold, left, right, leaf_class, counts)


@dataclass(frozen=True)
class ForestConfig:
    """Training hyperparameters; defaults follow the common random-forest setup."""

    n_trees: int = 100
    max_depth: int = 4
    features_per_split: int | None = None  # None -> ceil(sqrt(d))
    bootstrap: bool = True
    min_samples_leaf: int = 1

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")


class ForestClassifier(BaseEstimator, ClassifierMixin):
    """Majority-vote random forest with substream-per-tree determinism.

    The ensemble score is the fraction of trees voting class 1 and the
    predicted class is 1 whenever that fraction reaches 1/2.  Tree i is a
    pure function of ``(random_state, i)`` and the data, so dropping or adding
    trees never perturbs the remaining ones.
    """

    def __init__(
        self,
        n_trees: int = 100,
        max_depth: int = 4,
        features_per_split: int | None = None,
        bootstrap: bool = True,
        min_samples_leaf: int = 1,
        random_state: int = 0,
    ):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.features_per_split = features_per_split
        self.bootstrap = bootstrap
        self.min_samples_leaf = min_samples_leaf
        self.random_state = random_state

    # -- training -----------------------------------------------------------

    def fit(self, X, y) -> "ForestClassifier":
        ForestConfig(
            n_trees=self.n_trees,
            max_depth=self.max_depth,
            features_per_split=self.features_per_split,
            bootstrap=self.bootstrap,
            min_samples_leaf=self.min_samples_leaf,
        )
        X = check_matrix(X, name="X")
        y = check_binary_labels(y, n_rows=X.shape[0])
        if X.shape[0] == 0:
            raise ValueError("cannot train on an empty dataset")
        n, d = X.shape
        self.n_features_in_ = d
        self.classes_ = np.array([0, 1])
        self.constant_ = len(np.unique(y)) < 2
        if self.constant_:
            warnings.warn("training labels contain a single class; forest is constant")
        mtry = self.features_per_split or math.ceil(math.sqrt(d))
        self.trees_ = [
            self._grow_one(X, y, i, n, mtry) for i in range(self.n_trees)
        ]
        return self

    def _grow_one(self, X, y, index: int, n: int, mtry: int) -> Tree:
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self.random_state, spawn_key=(index,))
        )
        if self.bootstrap:
            idx = rng.integers(0, n, size=n)
            Xb, yb = X[idx], y[idx]
        else:
            Xb, yb = X, y
        return _grow_tree(Xb, yb, rng, self.max_depth, mtry, self.min_samples_leaf)

    # -- prediction ---------------------------------------------------------

    def vote_counts(self, X) -> tuple[np.ndarray, int]:
        """Exact class-1 vote counts per row alongside the ensemble size."""
        self._check_fitted()
        X = check_matrix(X, n_cols=self.n_features_in_, name="X")
        votes = np.zeros(X.shape[0], dtype=np.int64)
        for tree in self.trees_:
            votes += tree.predict(X)
        return votes, self.n_trees

    def predict_score(self, X) -> np.ndarray:
        """Fraction of trees voting class 1, in {0, 1/N, ..., 1}."""
        votes, n = self.vote_counts(X)
        return votes / n

    def predict(self, X) -> np.ndarray:
        votes, n = self.vote_counts(X)
        return (2 * votes >= n).astype(np.int64)

    def score_point(self, x: np.ndarray) -> float:
        return float(self.predict_score(np.atleast_2d(x))[0])

    def _check_fitted(self) -> None:
        if not hasattr(self, "trees_"):
            raise RuntimeError("forest is not fitted; call fit() first")

    # -- structure accessors used by the counterfactual solver ---------------

    def thresholds_per_feature(self) -> dict[int, np.ndarray]:
        self._check_fitted()
        out = {}
        for j in range(self.n_features_in_):
            ts = np.unique(np.concatenate([t.thresholds_on(j) for t in self.trees_]))
            if ts.size:
                out[j] = ts
        return out

    def leaf_boxes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """All leaf cells stacked: (lo, hi, cls, tree_index)."""
        self._check_fitted()
        los, his, classes, owners = [], [], [], []
        for t_idx, tree in enumerate(self.trees_):
            lo, hi, cls = tree.leaf_boxes_d(self.n_features_in_)
            los.append(lo)
            his.append(hi)
            classes.append(cls)
            owners.append(np.full(cls.shape, t_idx))
        return (
            np.vstack(los),
            np.vstack(his),
            np.concatenate(classes),
            np.concatenate(owners),
        )


class StumpEnsemble(ForestClassifier):
    """Forest of single-split trees, the convex base-learner class.

    Each non-degenerate stump admits a halfspace encoding (a, b) with a
    single nonzero entry of a such that the stump votes class 1 exactly when
    ``a . x - b <= 0``: splitting feature j at threshold t gives a_j = +1,
    b = t when the left leaf holds class 1 and a_j = -1, b = -t when the
    right leaf does.
    """

    def __init__(
        self,
        n_trees: int = 100,
        features_per_split: int | None = None,
        bootstrap: bool = True,
        min_samples_leaf: int = 1,
        random_state: int = 0,
    ):
        super().__init__(
            n_trees=n_trees,
            max_depth=1,
            features_per_split=features_per_split,
            bootstrap=bootstrap,
            min_samples_leaf=min_samples_leaf,
            random_state=random_state,
        )

    def stump_encoding(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Halfspace form (A, b, degenerate) of every stump.

        A has one row per stump with at most one nonzero entry; rows of
        constant stumps (single leaf, or both leaves the same class) are zero
        and flagged in ``degenerate``.
        """
        self._check_fitted()
        d = self.n_features_in_
        A = np.zeros((self.n_trees, d))
        b = np.zeros(self.n_trees)
        degenerate = np.zeros(self.n_trees, dtype=bool)
        for i, tree in enumerate(self.trees_):
            if tree.feature[0] == _LEAF:
                degenerate[i] = True
                b[i] = 0.0 if tree.leaf_class[0] == 1 else -1.0
                continue
            j = int(tree.feature[0])
            t = float(tree.threshold[0])
            left_cls = int(tree.leaf_class[tree.left[0]])
            right_cls = int(tree.leaf_class[tree.right[0]])
            if left_cls == right_cls:
                degenerate[i] = True
                b[i] = 0.0 if left_cls == 1 else -1.0
            elif left_cls == 1:
                A[i, j] = 1.0
                b[i] = t
            else:
                A[i, j] = -1.0
                b[i] = -t
        return A, b, degenerate


# ---------------------------------------------------------------------------
# functional wrappers over the estimator API


def train_forest(data, config: ForestConfig, seed: int) -> ForestClassifier:
    forest = ForestClassifier(
        n_trees=config.n_trees,
        max_depth=config.max_depth,
        features_per_split=config.features_per_split,
        bootstrap=config.bootstrap,
        min_samples_leaf=config.min_samples_leaf,
        random_state=seed,
    )
    return forest.fit(data.X, data.y)


def train_stump_ensemble(data, n_trees: int, seed: int) -> StumpEnsemble:
    return StumpEnsemble(n_trees=n_trees, random_state=seed).fit(data.X, data.y)


# ---------------------------------------------------------------------------
# serialization

_FORMAT_VERSION = 1


def forest_to_dict(forest: ForestClassifier) -> dict:
    forest._check_fitted()
    trees = []
    for tree in forest.trees_:
        trees.append(
            {
                "feature": tree.feature.tolist(),
                # exact decimal strings: repr round-trips float64 exactly
                "threshold": [repr(float(t)) for t in tree.threshold],
                "left": tree.left.tolist(),
                "right": tree.right.tolist(),
                "leaf_class": tree.leaf_class.tolist(),
                "n_node_samples": tree.n_node_samples.tolist(),
            }
        )
    return {
        "format": "forestcf-forest",
        "version": _FORMAT_VERSION,
        "kind": "stumps" if isinstance(forest, StumpEnsemble) else "forest",
        "config": {
            "n_trees": forest.n_trees,
            "max_depth": forest.max_depth,
            "features_per_split": forest.features_per_split,
            "bootstrap": forest.bootstrap,
            "min_samples_leaf": forest.min_samples_leaf,
        },
        "random_state": forest.random_state,
        "n_features": forest.n_features_in_,
        "trees": trees,
    }


def forest_from_dict(doc: dict) -> ForestClassifier:
    if doc.get("format") != "forestcf-forest":
        raise ForestFormatError("not a forest document")
    if doc.get("version") != _FORMAT_VERSION:
        raise ForestFormatError(f"unsupported version {doc.get('version')!r}")
    cfg = doc["config"]
    if not doc.get("trees"):
        raise ForestFormatError("forest must contain at least one tree")
    if doc["kind"] == "stumps":
        forest = StumpEnsemble(
            n_trees=cfg["n_trees"],
            features_per_split=cfg["features_per_split"],
            bootstrap=cfg["bootstrap"],
            min_samples_leaf=cfg["min_samples_leaf"],
            random_state=doc["random_state"],
        )
    else:
        forest = ForestClassifier(random_state=doc["random_state"], **cfg)
    forest.n_features_in_ = int(doc["n_features"])
    forest.classes_ = np.array([0, 1])
    forest.constant_ = False
    trees = []
    for k, td in enumerate(doc["trees"]):
        n_nodes = len(td["feature"])
        for key in ("left", "right"):
            for child in td[key]:
                if child != _LEAF and not 0 <= child < n_nodes:
                    raise ForestFormatError(f"tree {k}: dangling {key} index {child}")
        trees.append(
            Tree(
                td["feature"],
                [float(s) for s in td["threshold"]],
                td["left"],
                td["right"],
                td["leaf_class"],
                td["n_node_samples"],
            )
        )
    forest.trees_ = trees
    if len(trees) != cfg["n_trees"]:
        raise ForestFormatError("tree count disagrees with config")
    return forest


def serialize_forest(forest: ForestClassifier, path: str | Path) -> None:
    Path(path).write_text(json.dumps(forest_to_dict(forest), indent=1))


def deserialize_forest(path: str | Path) -> ForestClassifier:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ForestFormatError(f"{path}: not valid JSON: {exc}") from exc
    return forest_from_dict(doc)
