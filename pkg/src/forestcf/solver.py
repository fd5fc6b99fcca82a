"""Exact minimum-distance counterfactual search over a trained forest.

The forest's score is piecewise constant on the grid of axis-aligned cells
induced by its split thresholds, so an optimal counterfactual always exists
on a finite candidate set: per feature, the query value itself plus, for each
threshold, the cheapest point on either side of it (the threshold value when
approaching from above, threshold + epsilon when approaching from below;
discrete features snap to their integer grid instead).

Search is best-first branch-and-bound over per-feature candidate assignments.
Expanding a node scores all children of the next variable in one vectorized
pass; the admissible lower bound combines three pieces:

* the distance already paid by assigned features,
* a vote bound: a solution collecting v votes must sit inside a class-1 leaf
  cell of at least v trees, so its remaining movement cost is at least the
  v-th smallest per-tree "cheapest entry" cost, minimized jointly with the
  vote-shortfall penalty,
* lower bounds for the optional plausibility terms.

The vote constraint is soft: a relaxation ``nu`` absorbs any shortfall at
penalty ``z_pen * nu`` with ``z_pen = 5000 * d``, which exceeds any
achievable distance, so relaxed solutions only appear when the threshold is
genuinely unreachable under the actionability constraints.

Equal-objective ties resolve to the lexicographically smallest explanation;
``brute_force_counterfactual`` enumerates the same grid exhaustively and is
the oracle the solver is certified against.
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass

import numpy as np
from numba import njit

from forestcf._validation import check_vector
from forestcf.data import Actionability, DatasetSchema, DistanceWeights, FeatureKind
from forestcf.ensemble import ForestClassifier, Tree

__all__ = [
    "EPSILON",
    "CounterfactualProblem",
    "Explanation",
    "CandidateGrid",
    "build_candidate_grid",
    "solve_counterfactual",
    "brute_force_counterfactual",
    "forest_with_target",
    "GridTooLargeError",
]

#: Offset placing a candidate strictly on the far side of a threshold,
#: in normalized feature units.
EPSILON = 1e-6

_TIE_TOL = 1e-12
_CHANGE_TOL = 1e-9


class GridTooLargeError(RuntimeError):
    """The brute-force guard refused an oversized candidate grid."""


@dataclass(frozen=True)
class Explanation:
    """An optimal (or best-incumbent) counterfactual for one query point."""

    x: np.ndarray
    distance: float
    votes: int
    score: float
    nu: float
    optimal: bool
    changed_features: tuple[tuple[int, float, float], ...]
    objective: float
    plausibility_penalty: float = 0.0

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        x.setflags(write=False)
        object.__setattr__(self, "x", x)


@dataclass(frozen=True)
class CandidateGrid:
    """Per-feature sorted candidate values the optimum is searched over."""

    values: tuple[np.ndarray, ...]

    def size(self) -> int:
        out = 1
        for v in self.values:
            out *= max(1, len(v))
        return out


@dataclass
class CounterfactualProblem:
    """A query point, a trained forest, and the constraints on the answer.

    ``min_votes`` is the vote count the explanation must reach (from
    :func:`forestcf.thresholds.select_threshold`); ``target_class`` flips the
    forest's labels when 0.  ``plausibility`` is an optional isolation-forest
    constraint or local-outlier-factor penalty from
    :mod:`forestcf.plausibility`.
    """

    forest: ForestClassifier
    x0: np.ndarray
    schema: DatasetSchema
    min_votes: int
    tau: float = 0.5
    weights: DistanceWeights | None = None
    target_class: int = 1
    plausibility: object | None = None
    z_pen: float | None = None
    timeout: float | None = None

    def __post_init__(self) -> None:
        self.x0 = check_vector(self.x0, size=self.schema.d, name="x0")
        n = self.forest.n_trees
        if not math.ceil(n / 2) <= self.min_votes <= n:
            raise ValueError(
                f"min_votes must lie in [ceil(N/2), N] = [{math.ceil(n / 2)}, {n}], "
                f"got {self.min_votes}"
            )
        if self.target_class not in (0, 1):
            raise ValueError("target_class must be 0 or 1")
        if self.weights is None:
            self.weights = DistanceWeights.for_schema(self.schema)
        if self.z_pen is None:
            self.z_pen = 5000.0 * self.schema.d


def forest_with_target(forest: ForestClassifier, target_class: int) -> ForestClassifier:
    """View of the forest whose class-1 votes are votes for ``target_class``."""
    if target_class == 1:
        return forest
    flipped = ForestClassifier(
        n_trees=forest.n_trees,
        max_depth=forest.max_depth,
        features_per_split=forest.features_per_split,
        bootstrap=forest.bootstrap,
        min_samples_leaf=forest.min_samples_leaf,
        random_state=forest.random_state,
    )
    flipped.n_features_in_ = forest.n_features_in_
    flipped.classes_ = forest.classes_
    flipped.constant_ = getattr(forest, "constant_", False)
    flipped.trees_ = [
        Tree(t.feature, t.threshold, t.left, t.right, 1 - t.leaf_class, t.n_node_samples)
        for t in forest.trees_
    ]
    return flipped


# ---------------------------------------------------------------------------
# candidate grid


def _grid_levels(spec) -> int | None:
    """Number of grid intervals for snapping (1 for binary/one-hot)."""
    if spec.kind is FeatureKind.DISCRETE:
        return spec.n_levels - 1
    if spec.kind in (FeatureKind.BINARY, FeatureKind.CATEGORICAL):
        return 1
    return None


def _cone_filter(values: np.ndarray, x0j: float, act: Actionability) -> np.ndarray:
    if act is Actionability.FIXED:
        return np.array([x0j])
    if act is Actionability.INCREASE_ONLY:
        return values[values >= x0j - 1e-15]
    if act is Actionability.DECREASE_ONLY:
        return values[values <= x0j + 1e-15]
    return values


def _feature_candidates(spec, x0j: float, thresholds: np.ndarray) -> np.ndarray:
    m = _grid_levels(spec)
    vals = [x0j]
    for b in thresholds:
        if m is None:
            vals.append(b)
            if b + EPSILON <= 1.0:
                vals.append(b + EPSILON)
        else:
            below = math.floor(b * m + 1e-12) / m
            above = (math.floor(b * m + 1e-12) + 1) / m
            if 0.0 <= below <= 1.0:
                vals.append(below)
            if 0.0 <= above <= 1.0:
                vals.append(above)
    arr = np.unique(np.clip(np.asarray(vals, dtype=float), 0.0, 1.0))
    return _cone_filter(arr, x0j, spec.actionability)


def _merged_thresholds(problem: CounterfactualProblem) -> dict[int, np.ndarray]:
    forest = forest_with_target(problem.forest, problem.target_class)
    thresholds = forest.thresholds_per_feature()
    extra = getattr(problem.plausibility, "thresholds_per_feature", None)
    if extra is not None:
        for j, ts in extra().items():
            base = thresholds.get(j, np.array([]))
            thresholds[j] = np.unique(np.concatenate([base, ts]))
    return thresholds


def build_candidate_grid(problem: CounterfactualProblem) -> CandidateGrid:
    """Candidate values per feature: the query value plus both sides of every
    split threshold of the forest (and plausibility forest), clipped to the
    domain and the feature's actionability cone."""
    thresholds = _merged_thresholds(problem)
    anchors = getattr(problem.plausibility, "anchors", None)
    values = []
    for j, spec in enumerate(problem.schema.features):
        cands = _feature_candidates(
            spec, float(problem.x0[j]), thresholds.get(j, np.array([]))
        )
        if anchors is not None:
            with_anchors = np.unique(np.concatenate([cands, anchors[:, j]]))
            cands = _cone_filter(with_anchors, float(problem.x0[j]), spec.actionability)
        values.append(cands)
    return CandidateGrid(values=tuple(values))


# ---------------------------------------------------------------------------
# search variables


@dataclass
class _Var:
    cols: tuple[int, ...]
    patterns: np.ndarray  # (n_candidates, len(cols)) column values
    costs: np.ndarray  # weighted distance contribution of each pattern


def _dominant_subset(
    values: np.ndarray, costs: np.ndarray, thresholds: np.ndarray
) -> np.ndarray:
    """Indices of the cheapest candidate per inter-threshold cell.

    Candidates sharing a cell route identically through every tree, so only
    the cheapest (then smallest) one can appear in an optimal solution.
    """
    cells = np.searchsorted(thresholds, values, side="left")
    keep = []
    for cell in np.unique(cells):
        members = np.nonzero(cells == cell)[0]
        order = members[np.lexsort((values[members], costs[members]))]
        keep.append(order[0])
    return np.sort(np.array(keep))


def _build_vars(
    problem: CounterfactualProblem,
    grid: CandidateGrid,
    *,
    prune_dominated: bool,
) -> tuple[list[_Var], list[int]]:
    """Group one-hot columns into categorical variables; order by first column.

    Returns the search variables plus the static columns (fixed or
    single-candidate features) that keep their query value.
    """
    schema = problem.schema
    w = problem.weights.w
    x0 = problem.x0
    thresholds = _merged_thresholds(problem)
    grouped_cols = {c for cols in schema.groups.values() for c in cols}
    vars_: list[_Var] = []
    static: list[int] = []

    for gid, cols in sorted(schema.groups.items(), key=lambda kv: kv[1][0]):
        cols = list(cols)
        patterns = []
        for cat in range(len(cols)):
            pattern = np.zeros(len(cols))
            pattern[cat] = 1.0
            ok = True
            for local_j, col in enumerate(cols):
                act = schema.features[col].actionability
                delta = pattern[local_j] - x0[col]
                if act is Actionability.FIXED and delta != 0:
                    ok = False
                elif act is Actionability.INCREASE_ONLY and delta < 0:
                    ok = False
                elif act is Actionability.DECREASE_ONLY and delta > 0:
                    ok = False
            if ok:
                patterns.append(pattern)
        patterns = np.array(patterns)
        costs = np.abs(patterns - x0[cols]) @ w[cols]
        if len(patterns) > 1:
            vars_.append(_Var(cols=tuple(cols), patterns=patterns, costs=costs))
        else:
            static.extend(cols)

    for j, spec in enumerate(schema.features):
        if j in grouped_cols:
            continue
        cands = grid.values[j]
        costs = np.abs(cands - x0[j]) * w[j]
        if prune_dominated and len(cands) > 1:
            keep = _dominant_subset(cands, costs, thresholds.get(j, np.array([])))
            cands, costs = cands[keep], costs[keep]
        if len(cands) > 1:
            vars_.append(_Var(cols=(j,), patterns=cands[:, None], costs=costs))
        else:
            static.append(j)

    vars_.sort(key=lambda v: (len(v.costs), v.cols[0]))
    # children are generated cheapest-first; ties by lexicographic pattern
    for var in vars_:
        order = np.lexsort(tuple(var.patterns.T[::-1]) + (var.costs,))
        var.patterns = var.patterns[order]
        var.costs = var.costs[order]
    return vars_, static


# ---------------------------------------------------------------------------
# the engine


@njit(cache=True)
def _scalar_child_kernel(vals, b_lo, b_hi, gaps, owner, n_trees, min_votes, z_pen, iso_lb):
    """Vote-bound part of the child bound for a one-column variable.

    For each candidate value: per-tree cheapest remaining movement into a
    class-1 cell, then the best trade-off between collecting v votes (the
    v-th smallest movement) and paying the shortfall penalty for the rest.
    """
    n_cand = vals.shape[0]
    out = np.empty(n_cand)
    per_tree = np.empty(n_trees)
    for c in range(n_cand):
        v = vals[c]
        for t in range(n_trees):
            per_tree[t] = np.inf
        for b in range(b_lo.shape[0]):
            if b_lo[b] < v and v <= b_hi[b]:
                g = gaps[b]
                o = owner[b]
                if g < per_tree[o]:
                    per_tree[o] = g
        srt = np.sort(per_tree)
        lb = iso_lb[c]
        best = z_pen * max(min_votes / n_trees, lb)
        for v_cnt in range(1, min_votes + 1):
            move = srt[v_cnt - 1]
            if move == np.inf:
                break
            cand = move + z_pen * max((min_votes - v_cnt) / n_trees, lb)
            if cand < best:
                best = cand
        out[c] = best
    return out


class _Engine:
    """Precomputed leaf-cell geometry plus the branch-and-bound loop.

    Variables are assigned in a fixed order, so a search node is the tuple of
    candidate indices of its assigned prefix; feasibility of the unassigned
    remainder is pre-reduced into suffix arrays indexed by prefix length.
    """

    def __init__(self, problem: CounterfactualProblem, *, full_grid: bool = False):
        self.problem = problem
        self.forest = forest_with_target(problem.forest, problem.target_class)
        self.n_trees = self.forest.n_trees
        self.x0 = problem.x0
        self.w = problem.weights.w
        self.d = problem.schema.d
        plaus = problem.plausibility
        self.iso = plaus if getattr(plaus, "is_constraint", False) else None
        self.lof = plaus if getattr(plaus, "is_penalty", False) else None
        self.grid = build_candidate_grid(problem)
        self.vars, self.static_cols = _build_vars(
            problem, self.grid, prune_dominated=not full_grid and self.lof is None
        )
        self.n_vars = len(self.vars)
        self.z_pen = problem.z_pen
        self.min_votes = problem.min_votes
        self._prepare_ranges()
        self._prepare_boxes()
        self._prepare_iso()
        self._prepare_suffixes()

    # -- static precomputation ------------------------------------------

    def _prepare_ranges(self) -> None:
        self.alo = self.x0.copy()
        self.ahi = self.x0.copy()
        for var in self.vars:
            for local, j in enumerate(var.cols):
                col = var.patterns[:, local]
                self.alo[j] = col.min()
                self.ahi[j] = col.max()

    def _prepare_boxes(self) -> None:
        lo, hi, cls, owner = self.forest.leaf_boxes()
        keep = cls == 1
        lo, hi, owner = lo[keep], hi[keep], owner[keep]
        order = np.argsort(owner, kind="stable")
        self.b_lo, self.b_hi, self.b_owner = lo[order], hi[order], owner[order]
        self.n_boxes = self.b_lo.shape[0]
        # trees absent here have no class-1 leaf and can never vote
        self.seg_owners, self.seg_starts = np.unique(self.b_owner, return_index=True)
        gap = np.maximum(
            np.maximum(self.b_lo - self.x0[None, :], self.x0[None, :] - self.b_hi), 0.0
        )
        self.gap_w = gap * self.w[None, :]

    def _prepare_iso(self) -> None:
        if self.iso is None:
            return
        lo, hi, path, owner = self.iso.leaf_cells(self.d)
        order = np.argsort(owner, kind="stable")
        self.i_lo, self.i_hi = lo[order], hi[order]
        self.i_path = path[order]
        _, self.i_starts = np.unique(owner[order], return_index=True)

    def _contain_static(self, lo_arr, hi_arr, cols) -> np.ndarray:
        out = np.ones(lo_arr.shape[0], dtype=bool)
        for j in cols:
            out &= (self.ahi[j] > lo_arr[:, j]) & (self.alo[j] <= hi_arr[:, j])
        return out

    def _prepare_suffixes(self) -> None:
        var_cols = [list(v.cols) for v in self.vars]
        n_v = self.n_vars
        self.suffix_ok = [None] * (n_v + 1)
        self.suffix_gap = [None] * (n_v + 1)
        ok = self._contain_static(self.b_lo, self.b_hi, self.static_cols)
        gap = np.zeros(self.n_boxes)
        self.suffix_ok[n_v] = ok
        self.suffix_gap[n_v] = gap
        for v in range(n_v - 1, -1, -1):
            ok = ok & self._contain_static(self.b_lo, self.b_hi, var_cols[v])
            gap = gap + self.gap_w[:, var_cols[v]].sum(axis=1)
            self.suffix_ok[v] = ok
            self.suffix_gap[v] = gap
        if self.iso is not None:
            self.i_suffix_ok = [None] * (n_v + 1)
            iok = self._contain_static(self.i_lo, self.i_hi, self.static_cols)
            self.i_suffix_ok[n_v] = iok
            for v in range(n_v - 1, -1, -1):
                iok = iok & self._contain_static(self.i_lo, self.i_hi, var_cols[v])
                self.i_suffix_ok[v] = iok

    # -- prefix geometry ---------------------------------------------------

    def _prefix_ok(self, base: np.ndarray, lo_arr, hi_arr, prefix) -> np.ndarray:
        ok = base
        for v_idx, cand in enumerate(prefix):
            var = self.vars[v_idx]
            pattern = var.patterns[cand]
            for local, j in enumerate(var.cols):
                val = pattern[local]
                ok = ok & (val > lo_arr[:, j]) & (val <= hi_arr[:, j])
        return ok

    def _prefix_distance(self, prefix) -> float:
        return float(sum(self.vars[i].costs[c] for i, c in enumerate(prefix)))

    def _candidate_ok(self, base_ok: np.ndarray, var: _Var, lo_arr, hi_arr) -> np.ndarray:
        """[n_candidates, n_cells] feasibility after assigning each candidate."""
        ok = np.broadcast_to(base_ok, (var.patterns.shape[0], base_ok.shape[0])).copy()
        for local, j in enumerate(var.cols):
            v = var.patterns[:, local][:, None]
            ok &= (v > lo_arr[None, :, j]) & (v <= hi_arr[None, :, j])
        return ok

    # -- bound machinery ---------------------------------------------------

    def _child_bounds(self, prefix: tuple[int, ...]) -> np.ndarray:
        """Admissible lower bound for every child of the node ``prefix``."""
        k = len(prefix)
        var = self.vars[k]
        base_ok = self._prefix_ok(self.suffix_ok[k + 1], self.b_lo, self.b_hi, prefix)
        live = np.nonzero(base_ok)[0]
        n_cand = var.patterns.shape[0]
        iso_lb = self._child_iso_lb(prefix, var)
        dist = self._prefix_distance(prefix) + var.costs
        if len(var.cols) == 1:
            j = var.cols[0]
            best = _scalar_child_kernel(
                np.ascontiguousarray(var.patterns[:, 0]),
                np.ascontiguousarray(self.b_lo[live, j]),
                np.ascontiguousarray(self.b_hi[live, j]),
                np.ascontiguousarray(self.suffix_gap[k + 1][live]),
                np.ascontiguousarray(self.b_owner[live]),
                self.n_trees,
                self.min_votes,
                self.z_pen,
                iso_lb,
            )
            return dist + best + self._child_lof_lb(prefix, var)
        # one-hot group variables: few candidates, plain numpy pass
        b_lo, b_hi = self.b_lo[live], self.b_hi[live]
        gaps = self.suffix_gap[k + 1][live]
        owners = self.b_owner[live]
        ok = np.ones((n_cand, live.size), dtype=bool)
        for local, j in enumerate(var.cols):
            v = var.patterns[:, local][:, None]
            ok &= (v > b_lo[None, :, j]) & (v <= b_hi[None, :, j])
        per_tree = np.full((n_cand, self.n_trees), np.inf)
        if live.size:
            seg_owners, seg_starts = np.unique(owners, return_index=True)
            extra = np.where(ok, gaps[None, :], np.inf)
            per_tree[:, seg_owners] = np.minimum.reduceat(extra, seg_starts, axis=1)
        per_tree.sort(axis=1)
        mv = self.min_votes
        moves = np.concatenate([np.zeros((n_cand, 1)), per_tree[:, :mv]], axis=1)
        vote_nu = np.maximum(mv - np.arange(mv + 1), 0) / self.n_trees
        padded = moves + self.z_pen * np.maximum(vote_nu[None, :], iso_lb[:, None])
        best = np.min(padded, axis=1)
        return dist + best + self._child_lof_lb(prefix, var)

    def _child_iso_lb(self, prefix, var) -> np.ndarray:
        n_cand = var.patterns.shape[0]
        if self.iso is None:
            return np.zeros(n_cand)
        k = len(prefix)
        base_ok = self._prefix_ok(self.i_suffix_ok[k + 1], self.i_lo, self.i_hi, prefix)
        ok = self._candidate_ok(base_ok, var, self.i_lo, self.i_hi)
        lo_path = np.where(ok, self.i_path[None, :], np.inf)
        hi_path = np.where(ok, self.i_path[None, :], -np.inf)
        a_lo = np.minimum.reduceat(lo_path, self.i_starts, axis=1).sum(axis=1)
        a_hi = np.maximum.reduceat(hi_path, self.i_starts, axis=1).sum(axis=1)
        norm = self.iso.normalizer
        return self.iso.nu_lower_bound_vec(a_lo / norm, a_hi / norm)

    def _child_lof_lb(self, prefix, var) -> np.ndarray:
        n_cand = var.patterns.shape[0]
        if self.lof is None:
            return np.zeros(n_cand)
        lo = self.alo.copy()
        hi = self.ahi.copy()
        for v_idx, cand in enumerate(prefix):
            pvar = self.vars[v_idx]
            for local, j in enumerate(pvar.cols):
                lo[j] = hi[j] = pvar.patterns[cand][local]
        anchors = self.lof.anchors
        others = [j for j in range(self.d) if j not in var.cols]
        gaps = np.maximum(
            np.maximum(anchors[:, others] - hi[others], lo[others] - anchors[:, others]), 0.0
        )
        g_base = gaps @ self.w[others]  # [K]
        cols = list(var.cols)
        add = np.abs(var.patterns[:, None, :] - anchors[None, :, cols]) @ self.w[cols]
        min_f = g_base[None, :] + add  # [C, K]
        vals = self.lof.lrd[None, :] * np.maximum(self.lof.delta[None, :], min_f)
        return self.lof.weight * vals.min(axis=1)

    # -- exact evaluation ----------------------------------------------------

    def assemble(self, prefix: tuple[int, ...]) -> np.ndarray:
        x = self.x0.copy()
        for v_idx, cand in enumerate(prefix):
            var = self.vars[v_idx]
            x[list(var.cols)] = var.patterns[cand]
        return x

    def evaluate(self, x: np.ndarray) -> dict:
        # exactly one leaf cell per tree contains x, so containment count = votes
        contain = ((x[None, :] > self.b_lo) & (x[None, :] <= self.b_hi)).all(axis=1)
        votes = int(contain.sum())
        dist = float(np.abs(x - self.x0) @ self.w)
        vote_nu = max(0, self.min_votes - votes) / self.n_trees
        if self.iso is not None:
            c_iso = ((x[None, :] > self.i_lo) & (x[None, :] <= self.i_hi)).all(axis=1)
            score = float(self.i_path[c_iso].sum()) / self.iso.normalizer
            iso_nu = self.iso.nu_of_score(score)
        else:
            iso_nu = 0.0
        nu = max(vote_nu, iso_nu)
        penalty = self.lof.penalty(x) if self.lof is not None else 0.0
        return {
            "votes": votes,
            "distance": dist,
            "nu": nu,
            "penalty": penalty,
            "objective": dist + self.z_pen * nu + penalty,
        }

    def _leaf_batch(self, prefix: tuple[int, ...]):
        """Objectives of all completions of a depth-(n_vars - 1) node."""
        var = self.vars[len(prefix)]
        n_cand = var.patterns.shape[0]
        base_ok = self._prefix_ok(self.suffix_ok[self.n_vars], self.b_lo, self.b_hi, prefix)
        ok = self._candidate_ok(base_ok, var, self.b_lo, self.b_hi)
        votes = ok.sum(axis=1)
        dist = self._prefix_distance(prefix) + var.costs
        vote_nu = np.maximum(self.min_votes - votes, 0) / self.n_trees
        if self.iso is not None:
            i_base = self._prefix_ok(
                self.i_suffix_ok[self.n_vars], self.i_lo, self.i_hi, prefix
            )
            c_iso = self._candidate_ok(i_base, var, self.i_lo, self.i_hi)
            scores = (np.where(c_iso, self.i_path[None, :], 0.0)).sum(axis=1)
            iso_nu = self.iso.nu_of_score_vec(scores / self.iso.normalizer)
        else:
            iso_nu = np.zeros(n_cand)
        nu = np.maximum(vote_nu, iso_nu)
        if self.lof is not None:
            X = np.tile(self.assemble(prefix), (n_cand, 1))
            X[:, list(var.cols)] = var.patterns
            penalty = self.lof.penalty_batch(X, self.w)
        else:
            penalty = np.zeros(n_cand)
        objective = dist + self.z_pen * nu + penalty
        return objective, votes, nu, dist, penalty

    # -- best-first search ----------------------------------------------------

    def _warm_start(self, width: int = 8):
        """Beam search over the variable levels: a strong initial incumbent.

        Keeps the ``width`` lowest-bound prefixes per level and evaluates all
        completions of the surviving beam, so the main search starts with a
        realistic pruning cutoff.
        """
        beam = [()]
        for level in range(self.n_vars - 1):
            scored = []
            for prefix in beam:
                bounds = self._child_bounds(prefix)
                for c in np.argsort(bounds, kind="stable")[:width]:
                    scored.append((float(bounds[c]), prefix + (int(c),)))
            scored.sort(key=lambda t: t[0])
            beam = [p for _, p in scored[:width]]
        best_x, best_info = None, None
        for prefix in beam:
            objective, votes, nu, dist, penalty = self._leaf_batch(prefix)
            c = int(np.argmin(objective))
            if best_info is None or objective[c] < best_info["objective"]:
                best_x = self.assemble(prefix + (c,))
                best_info = {
                    "votes": int(votes[c]),
                    "distance": float(dist[c]),
                    "nu": float(nu[c]),
                    "penalty": float(penalty[c]),
                    "objective": float(objective[c]),
                }
        return best_x, best_info

    def solve(self) -> Explanation:
        x0_info = self.evaluate(self.x0)
        # a feasible start is globally optimal unless a penalty term can
        # reward moving away from the query point
        if x0_info["objective"] <= _TIE_TOL and self.lof is None:
            return self.explanation(self.x0.copy(), x0_info, optimal=True)
        if self.n_vars == 0:
            return self.explanation(self.x0.copy(), x0_info, optimal=True)

        inc_x, inc_info = self.x0.copy(), x0_info
        warm_x, warm_info = self._warm_start()
        if warm_info is not None and warm_info["objective"] < inc_info["objective"]:
            inc_x, inc_info = warm_x, warm_info
        deadline = (
            time.monotonic() + self.problem.timeout
            if self.problem.timeout is not None
            else None
        )
        timed_out = False
        counter = itertools.count()
        heap: list[tuple[float, int, tuple[int, ...]]] = []

        def consider_leaves(prefix: tuple[int, ...]) -> None:
            nonlocal inc_x, inc_info
            objective, votes, nu, dist, penalty = self._leaf_batch(prefix)
            var = self.vars[len(prefix)]
            best = float(objective.min())
            if best > inc_info["objective"] + _TIE_TOL:
                return
            for c in np.nonzero(objective <= best + _TIE_TOL)[0]:
                x = self.assemble(prefix + (int(c),))
                better = objective[c] < inc_info["objective"] - _TIE_TOL
                tie = (
                    abs(objective[c] - inc_info["objective"]) <= _TIE_TOL
                    and tuple(x) < tuple(inc_x)
                )
                if better or tie:
                    inc_x = x
                    inc_info = {
                        "votes": int(votes[c]),
                        "distance": float(dist[c]),
                        "nu": float(nu[c]),
                        "penalty": float(penalty[c]),
                        "objective": float(objective[c]),
                    }

        def expand(prefix: tuple[int, ...]) -> None:
            if len(prefix) == self.n_vars - 1:
                consider_leaves(prefix)
                return
            bounds = self._child_bounds(prefix)
            cutoff = inc_info["objective"] + _TIE_TOL
            for c in np.nonzero(bounds <= cutoff)[0]:
                heapq.heappush(heap, (float(bounds[c]), next(counter), prefix + (int(c),)))

        expand(())
        pops = 0
        while heap:
            bound, _, prefix = heapq.heappop(heap)
            pops += 1
            if deadline is not None and pops % 16 == 0 and time.monotonic() > deadline:
                timed_out = True
                break
            if bound > inc_info["objective"] + _TIE_TOL:
                break
            expand(prefix)
        return self.explanation(inc_x, inc_info, optimal=not timed_out)

    def explanation(self, x: np.ndarray, info: dict, optimal: bool) -> Explanation:
        changed = tuple(
            (j, float(self.x0[j]), float(x[j]))
            for j in range(self.d)
            if abs(x[j] - self.x0[j]) > _CHANGE_TOL
        )
        return Explanation(
            x=x,
            distance=info["distance"],
            votes=info["votes"],
            score=info["votes"] / self.n_trees,
            nu=info["nu"],
            optimal=optimal,
            changed_features=changed,
            objective=info["objective"],
            plausibility_penalty=info["penalty"],
        )

    # -- exhaustive oracle ----------------------------------------------------

    def brute_force(self, guard: int = 10_000_000) -> Explanation:
        total = 1
        for var in self.vars:
            total *= len(var.costs)
        if total > guard:
            raise GridTooLargeError(f"grid holds {total} points, guard is {guard}")
        inc_x = self.x0.copy()
        inc_info = self.evaluate(self.x0)
        if self.lof is not None or inc_info["objective"] > _TIE_TOL:
            for combo in itertools.product(*(range(len(v.costs)) for v in self.vars)):
                x = self.assemble(combo)
                info = self.evaluate(x)
                better = info["objective"] < inc_info["objective"] - _TIE_TOL
                tie = (
                    abs(info["objective"] - inc_info["objective"]) <= _TIE_TOL
                    and tuple(x) < tuple(inc_x)
                )
                if better or tie:
                    inc_x, inc_info = x, info
        return self.explanation(inc_x, inc_info, optimal=True)


def solve_counterfactual(problem: CounterfactualProblem) -> Explanation:
    """Provably optimal counterfactual over the candidate grid (see module doc)."""
    return _Engine(problem).solve()


def brute_force_counterfactual(
    problem: CounterfactualProblem, *, guard: int = 10_000_000
) -> Explanation:
    """Exhaustive enumeration of the candidate grid; the solver's oracle."""
    return _Engine(problem, full_grid=True).brute_force(guard=guard)
