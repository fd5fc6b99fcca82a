"""Plausibility terms the counterfactual solver can enforce or penalize.

Two systems, both defined over target-class training samples only:

* an isolation-forest constraint bounding the normalized average path length
  of the explanation, with the bound derived from a contamination quantile of
  the training scores, and
* a 1-nearest-neighbor local-outlier-factor penalty added to the objective,
  restricted to a small anchor set around the query point.

Path-length convention: deeper isolation (longer paths) marks a point as
harder to isolate, i.e. more typical of the training distribution.  The
constraint ships in two directions: ``le`` caps the path score from above
exactly as the consuming formulation states it, while ``ge`` is the override
matching the usual anomaly-score intent (shallow points are the outliers).
Both pick their bound so that exactly ``ceil(contamination * n)`` training
points violate it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin

from forestcf._validation import check_matrix

__all__ = [
    "average_path_length",
    "IsolationForestModel",
    "AnomalyConstraint",
    "train_isolation_forest",
    "LofPenalty",
    "lof_penalty",
    "serialize_isolation",
    "deserialize_isolation",
]

_EULER_GAMMA = 0.5772156649015329
_LRD_CAP = 1e6  # duplicate anchors would otherwise blow up the density


def average_path_length(n: int | np.ndarray):
    """Expected search depth c(n) of a binary search tree over n samples.

    c(0) = c(1) = 0, c(2) = 1, and for larger n the harmonic-number form
    2 H(n-1) - 2 (n-1)/n with H continued as ln(m) + Euler-Mascheroni.
    """
    n_arr = np.asarray(n, dtype=float)
    out = np.zeros_like(n_arr)
    out[n_arr == 2] = 1.0
    big = n_arr > 2
    nb = n_arr[big]
    out[big] = 2.0 * (np.log(nb - 1.0) + _EULER_GAMMA) - 2.0 * (nb - 1.0) / nb
    if np.isscalar(n) or np.ndim(n) == 0:
        return float(out)
    return out


class _IsoTree:
    """Flat-array isolation tree; leaves carry depth + c(n_leaf)."""

    __slots__ = ("feature", "threshold", "left", "right", "leaf_value", "n_node_samples")

    def __init__(self, feature, threshold, left, right, leaf_value, n_node_samples):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.leaf_value = np.asarray(leaf_value, dtype=float)
        self.n_node_samples = np.asarray(n_node_samples, dtype=np.int64)

    def path_values(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        idx = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            feat = self.feature[idx]
            internal = feat >= 0
            if not internal.any():
                return self.leaf_value[idx]
            rows = np.nonzero(internal)[0]
            node = idx[rows]
            go_left = X[rows, feat[rows]] <= self.threshold[node]
            idx[rows] = np.where(go_left, self.left[node], self.right[node])

    def thresholds_on(self, j: int) -> np.ndarray:
        return np.unique(self.threshold[self.feature == j])

    def leaf_cells_d(self, d: int):
        los, his, vals = [], [], []

        def walk(i, lo, hi):
            if self.feature[i] < 0:
                los.append(lo.copy())
                his.append(hi.copy())
                vals.append(float(self.leaf_value[i]))
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
        return np.array(los), np.array(his), np.array(vals)


def _grow_iso_tree(X: np.ndarray, rng, height_limit: int) -> _IsoTree:
    feature, threshold, left, right, leaf_value, counts = [], [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        leaf_value.append(0.0)
        counts.append(0)
        return len(feature) - 1

    def build(rows: np.ndarray, depth: int) -> int:
        node = new_node()
        counts[node] = rows.size
        lo = X[rows].min(axis=0)
        hi = X[rows].max(axis=0)
        splittable = np.nonzero(hi > lo)[0]
        if depth >= height_limit or rows.size <= 1 or splittable.size == 0:
            leaf_value[node] = depth + average_path_length(rows.size)
            return node
        j = int(rng.choice(splittable))
        cut = float(rng.uniform(lo[j], hi[j]))
        go_left = X[rows, j] <= cut
        if go_left.all() or not go_left.any():
            # cut collided with the value range edge; isolate by midpoint rule
            leaf_value[node] = depth + average_path_length(rows.size)
            return node
        feature[node] = j
        threshold[node] = cut
        left[node] = build(rows[go_left], depth + 1)
        right[node] = build(rows[~go_left], depth + 1)
        return node

    build(np.arange(X.shape[0]), 0)
    return _IsoTree(feature, threshold, left, right, leaf_value, counts)


class IsolationForestModel(BaseEstimator, OutlierMixin):
    """Isolation forest scored by normalized average path length.

    ``path_score`` returns A(x) = mean tree path length / c(subsample size);
    larger values mean the point is harder to isolate, i.e. deeper inside the
    training distribution.  Trees use a uniformly random (non-constant)
    feature and a uniform cut within the node's value range, grown to depth
    ceil(log2(subsample size)) or isolation.
    """

    def __init__(
        self,
        n_trees: int = 50,
        subsample_size: int | None = 256,
        random_state: int = 0,
    ):
        self.n_trees = n_trees
        self.subsample_size = subsample_size
        self.random_state = random_state

    def fit(self, X, y=None) -> "IsolationForestModel":
        X = check_matrix(X, name="X")
        n = X.shape[0]
        if n < 2:
            raise ValueError("isolation forest needs at least 2 samples")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        self.n_features_in_ = X.shape[1]
        psi = n if self.subsample_size is None else min(self.subsample_size, n)
        self.psi_ = psi
        self.normalizer_ = self.n_trees * average_path_length(psi)
        height_limit = max(1, math.ceil(math.log2(psi))) if psi > 1 else 0
        self.trees_ = []
        degenerate = 0
        for i in range(self.n_trees):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=self.random_state, spawn_key=(i,))
            )
            rows = rng.choice(n, size=psi, replace=False)
            tree = _grow_iso_tree(X[rows], rng, height_limit)
            if tree.feature[0] < 0:
                degenerate += 1
            self.trees_.append(tree)
        self.n_degenerate_trees_ = degenerate
        return self

    def path_score(self, X) -> np.ndarray:
        X = check_matrix(X, n_cols=self.n_features_in_, name="X")
        total = np.zeros(X.shape[0])
        for tree in self.trees_:
            total += tree.path_values(X)
        return total / self.normalizer_

    def thresholds_per_feature(self) -> dict[int, np.ndarray]:
        out = {}
        for j in range(self.n_features_in_):
            ts = np.unique(np.concatenate([t.thresholds_on(j) for t in self.trees_]))
            if ts.size:
                out[j] = ts
        return out

    def leaf_cells(self, d: int):
        los, his, vals, owners = [], [], [], []
        for t_idx, tree in enumerate(self.trees_):
            lo, hi, val = tree.leaf_cells_d(d)
            los.append(lo)
            his.append(hi)
            vals.append(val)
            owners.append(np.full(val.shape, t_idx))
        return (
            np.vstack(los),
            np.vstack(his),
            np.concatenate(vals),
            np.concatenate(owners),
        )


@dataclass(frozen=True)
class AnomalyConstraint:
    """Path-score constraint consumable by the solver.

    ``direction='le'`` enforces A <= bound (+ nu), the formulation as
    printed; ``direction='ge'`` enforces A >= bound (- nu), the override
    matching the usual outlier-score intent.  ``offset`` mirrors the bound in
    score space, offset = -2^(sign * bound), so bound = |log2(-offset)|.
    """

    forest: IsolationForestModel
    bound: float
    contamination: float
    direction: str = "le"

    is_constraint = True

    def __post_init__(self) -> None:
        if self.direction not in ("le", "ge"):
            raise ValueError("direction must be 'le' or 'ge'")

    @property
    def offset(self) -> float:
        sign = 1.0 if self.direction == "le" else -1.0
        return -(2.0 ** (sign * self.bound))

    @property
    def normalizer(self) -> float:
        return self.forest.normalizer_

    def thresholds_per_feature(self):
        return self.forest.thresholds_per_feature()

    def leaf_cells(self, d: int):
        return self.forest.leaf_cells(d)

    def nu_of_score(self, a: float) -> float:
        if self.direction == "le":
            return max(0.0, a - self.bound)
        return max(0.0, self.bound - a)

    def nu_of_score_vec(self, a: np.ndarray) -> np.ndarray:
        if self.direction == "le":
            return np.maximum(0.0, a - self.bound)
        return np.maximum(0.0, self.bound - a)

    def nu_lower_bound(self, a_lo: float, a_hi: float) -> float:
        if self.direction == "le":
            return max(0.0, a_lo - self.bound)
        return max(0.0, self.bound - a_hi)

    def nu_lower_bound_vec(self, a_lo: np.ndarray, a_hi: np.ndarray) -> np.ndarray:
        if self.direction == "le":
            return np.maximum(0.0, a_lo - self.bound)
        return np.maximum(0.0, self.bound - a_hi)

    def satisfied(self, X: np.ndarray) -> np.ndarray:
        scores = self.forest.path_score(X)
        if self.direction == "le":
            return scores <= self.bound + 1e-12
        return scores >= self.bound - 1e-12


def train_isolation_forest(
    target_samples: np.ndarray,
    *,
    n_trees: int = 50,
    contamination: float = 0.1,
    subsample_size: int | None = 256,
    seed: int = 0,
    direction: str = "le",
) -> AnomalyConstraint:
    """Fit an isolation forest on target-class samples and fix its bound.

    The bound is the empirical quantile of the training path scores at which
    exactly ceil(contamination * n) samples violate the constraint, ties
    broken toward the stricter bound.
    """
    if not 0.0 < contamination <= 0.5:
        raise ValueError(f"contamination must lie in (0, 0.5], got {contamination}")
    X = check_matrix(target_samples, name="target_samples")
    forest = IsolationForestModel(
        n_trees=n_trees, subsample_size=subsample_size, random_state=seed
    ).fit(X)
    scores = np.sort(forest.path_score(X))
    n = scores.shape[0]
    k = math.ceil(contamination * n)
    k = min(k, n - 1)
    if direction == "le":
        bound = float(scores[n - k - 1])  # largest non-violating score
    else:
        bound = float(scores[k])  # smallest non-violating score
    return AnomalyConstraint(
        forest=forest, bound=bound, contamination=contamination, direction=direction
    )


# ---------------------------------------------------------------------------
# 1-nearest-neighbor local outlier factor penalty


@dataclass(frozen=True)
class LofPenalty:
    """Reachability-density penalty around the query's nearest anchors.

    ``anchors`` are the target-class training points closest to the query;
    ``delta[i]`` is anchor i's own nearest-neighbor distance and ``lrd[i]``
    the inverse nearest-neighbor distance of that neighbor.  The penalty of a
    point x is weight * lrd[i*] * max(delta[i*], dist(x, anchor i*)) with i*
    the anchor nearest to x.
    """

    anchors: np.ndarray
    lrd: np.ndarray
    delta: np.ndarray
    weight: float
    feature_weights: np.ndarray

    is_penalty = True

    def _distances(self, X: np.ndarray) -> np.ndarray:
        return np.abs(X[:, None, :] - self.anchors[None, :, :]) @ self.feature_weights

    def anchor_of(self, x: np.ndarray) -> int:
        return int(np.argmin(self._distances(np.atleast_2d(x))[0]))

    def penalty(self, x: np.ndarray) -> float:
        dists = self._distances(np.atleast_2d(x))[0]
        i = int(np.argmin(dists))
        return self.weight * float(self.lrd[i] * max(self.delta[i], dists[i]))

    def penalty_batch(self, X: np.ndarray, feature_weights=None) -> np.ndarray:
        dists = self._distances(X)
        idx = np.argmin(dists, axis=1)
        rows = np.arange(X.shape[0])
        reach = np.maximum(self.delta[idx], dists[rows, idx])
        return self.weight * self.lrd[idx] * reach


def lof_penalty(
    target_samples: np.ndarray,
    x0: np.ndarray,
    *,
    n_anchors: int = 10,
    weight: float = 1.0,
    feature_weights: np.ndarray | None = None,
) -> LofPenalty:
    """Build the anchor set and densities for the 1-LOF penalty around x0."""
    X = check_matrix(target_samples, name="target_samples")
    n = X.shape[0]
    if n < n_anchors + 1:
        raise ValueError(f"need at least {n_anchors + 1} target-class samples, got {n}")
    if weight < 0:
        raise ValueError("weight must be non-negative")
    w = (
        np.ones(X.shape[1])
        if feature_weights is None
        else np.asarray(feature_weights, dtype=float)
    )
    d_x0 = np.abs(X - np.asarray(x0, dtype=float)[None, :]) @ w
    anchor_idx = np.argsort(d_x0, kind="stable")[:n_anchors]

    # pairwise nearest-neighbor distances within the target class
    pair = np.abs(X[:, None, :] - X[None, :, :]) @ w
    np.fill_diagonal(pair, np.inf)
    nn_idx = np.argmin(pair, axis=1)
    nn_dist = pair[np.arange(n), nn_idx]

    delta = nn_dist[anchor_idx]
    neighbor_own_nn = nn_dist[nn_idx[anchor_idx]]
    with np.errstate(divide="ignore"):
        lrd = np.where(neighbor_own_nn > 0, 1.0 / neighbor_own_nn, _LRD_CAP)
    lrd = np.minimum(lrd, _LRD_CAP)
    return LofPenalty(
        anchors=X[anchor_idx].copy(),
        lrd=lrd.astype(float),
        delta=delta.astype(float),
        weight=float(weight),
        feature_weights=w,
    )


# ---------------------------------------------------------------------------
# serialization (same node-array format as classification forests)

_ISO_FORMAT_VERSION = 1


def serialize_isolation(constraint: AnomalyConstraint, path: str | Path) -> None:
    forest = constraint.forest
    trees = []
    for tree in forest.trees_:
        trees.append(
            {
                "feature": tree.feature.tolist(),
                "threshold": [repr(float(t)) for t in tree.threshold],
                "left": tree.left.tolist(),
                "right": tree.right.tolist(),
                "leaf_value": [repr(float(v)) for v in tree.leaf_value],
                "n_node_samples": tree.n_node_samples.tolist(),
            }
        )
    doc = {
        "format": "forestcf-isolation",
        "version": _ISO_FORMAT_VERSION,
        "config": {
            "n_trees": forest.n_trees,
            "subsample_size": forest.subsample_size,
            "random_state": forest.random_state,
        },
        "n_features": forest.n_features_in_,
        "psi": forest.psi_,
        "normalizer": repr(float(forest.normalizer_)),
        "bound": repr(float(constraint.bound)),
        "offset": repr(float(constraint.offset)),
        "contamination": constraint.contamination,
        "direction": constraint.direction,
        "trees": trees,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def deserialize_isolation(path: str | Path) -> AnomalyConstraint:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "forestcf-isolation":
        raise ValueError("not an isolation forest document")
    if doc.get("version") != _ISO_FORMAT_VERSION:
        raise ValueError(f"unsupported version {doc.get('version')!r}")
    cfg = doc["config"]
    forest = IsolationForestModel(**cfg)
    forest.n_features_in_ = int(doc["n_features"])
    forest.psi_ = int(doc["psi"])
    forest.normalizer_ = float(doc["normalizer"])
    forest.trees_ = [
        _IsoTree(
            td["feature"],
            [float(s) for s in td["threshold"]],
            td["left"],
            td["right"],
            [float(s) for s in td["leaf_value"]],
            td["n_node_samples"],
        )
        for td in doc["trees"]
    ]
    forest.n_degenerate_trees_ = sum(1 for t in forest.trees_ if t.feature[0] < 0)
    return AnomalyConstraint(
        forest=forest,
        bound=float(doc["bound"]),
        contamination=float(doc["contamination"]),
        direction=doc["direction"],
    )
