import numpy as np
import pytest

from forestcf.data import SyntheticSpec, generate_synthetic
from forestcf.ensemble import ForestConfig, train_forest
from forestcf.plausibility import (
    AnomalyConstraint,
    IsolationForestModel,
    _IsoTree,
    average_path_length,
    deserialize_isolation,
    lof_penalty,
    serialize_isolation,
    train_isolation_forest,
)
from forestcf.solver import (
    CounterfactualProblem,
    brute_force_counterfactual,
    solve_counterfactual,
)


def cluster_samples(seed=0, n=300):
    rng = np.random.default_rng(seed)
    return np.clip(rng.normal(0.5, 0.08, size=(n, 2)), 0.0, 1.0)


class TestAveragePathLength:
    def test_tiny_counts(self):
        assert average_path_length(0) == 0.0
        assert average_path_length(1) == 0.0
        # 2 H(1) - 2 * (1/2) with the exact harmonic number
        assert average_path_length(2) == 1.0

    def test_monotone_growth(self):
        vals = [average_path_length(n) for n in range(2, 200)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_vector_form(self):
        out = average_path_length(np.array([1, 2, 10]))
        assert out[0] == 0.0 and out[1] == 1.0 and out[2] > 1.0


class TestIsolationForest:
    def test_single_tree_leaf_depth_three_isolated_sample(self):
        # chain x<=0.5 -> x<=0.25 -> x<=0.125 -> leaf with one sample: path 3
        tree = _IsoTree(
            feature=[0, 0, 0, -1, -1, -1, -1],
            threshold=[0.5, 0.25, 0.125, 0, 0, 0, 0],
            left=[1, 2, 3, -1, -1, -1, -1],
            right=[4, 5, 6, -1, -1, -1, -1],
            leaf_value=[0, 0, 0, 3 + average_path_length(1), 1 + 0, 2 + 0, 3 + 0],
            n_node_samples=[8, 4, 2, 1, 4, 2, 1],
        )
        assert tree.path_values(np.array([[0.1]]))[0] == 3.0

    def test_duplicated_trees_leave_score_unchanged(self):
        X = cluster_samples()
        model = IsolationForestModel(n_trees=10, random_state=1).fit(X)
        doubled = IsolationForestModel(n_trees=20, random_state=1)
        doubled.n_features_in_ = model.n_features_in_
        doubled.psi_ = model.psi_
        doubled.trees_ = model.trees_ + model.trees_
        doubled.normalizer_ = 2 * model.normalizer_
        probe = np.array([[0.5, 0.5], [0.9, 0.1]])
        assert np.allclose(model.path_score(probe), doubled.path_score(probe))

    def test_cluster_point_scores_deeper_than_outlier(self):
        X = cluster_samples(seed=3)
        model = IsolationForestModel(n_trees=50, random_state=2).fit(X)
        center, outlier = model.path_score(np.array([[0.5, 0.5], [0.99, 0.01]]))
        assert center > outlier

    def test_partition_exactly_one_leaf_per_tree(self):
        X = cluster_samples(seed=4)
        model = IsolationForestModel(n_trees=8, random_state=5).fit(X)
        lo, hi, path, owner = model.leaf_cells(2)
        rng = np.random.default_rng(6)
        for x in rng.random((50, 2)):
            contain = ((x > lo) & (x <= hi)).all(axis=1)
            counts = np.bincount(owner[contain], minlength=8)
            assert (counts == 1).all()
            # containment-based scoring agrees with tree routing
            total = path[contain].sum()
            assert total / model.normalizer_ == pytest.approx(
                model.path_score(x[None, :])[0], abs=1e-12
            )

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            IsolationForestModel().fit(np.array([[0.1, 0.2]]))

    def test_dimension_mismatch(self):
        model = IsolationForestModel(n_trees=3, random_state=0).fit(cluster_samples())
        with pytest.raises(ValueError):
            model.path_score(np.zeros((2, 5)))

    def test_constant_data_degenerate_trees_flagged(self):
        X = np.full((30, 2), 0.5)
        model = IsolationForestModel(n_trees=5, random_state=0).fit(X)
        assert model.n_degenerate_trees_ == 5
        assert (model.path_score(X[:2]) >= 0).all()


class TestAnomalyConstraint:
    def test_contamination_quantile_exact_on_training(self):
        X = cluster_samples(seed=7)
        for c in (0.05, 0.1, 0.2, 0.3, 0.4, 0.5):
            con = train_isolation_forest(X, n_trees=25, contamination=c, seed=11)
            satisfied = con.satisfied(X)
            n_violate = int((~satisfied).sum())
            assert n_violate == int(np.ceil(c * X.shape[0]))
            assert satisfied.mean() >= 1 - c - 1e-12

    def test_bound_non_increasing_in_contamination(self):
        X = cluster_samples(seed=8)
        bounds = [
            train_isolation_forest(X, n_trees=25, contamination=c, seed=11).bound
            for c in (0.05, 0.1, 0.2, 0.3, 0.4, 0.5)
        ]
        assert all(a >= b for a, b in zip(bounds, bounds[1:]))

    def test_ge_direction_excludes_shallow_points(self):
        X = cluster_samples(seed=9)
        con = train_isolation_forest(X, n_trees=25, contamination=0.2, seed=11, direction="ge")
        scores = con.forest.path_score(X)
        violators = scores < con.bound - 1e-12
        assert violators.sum() == int(np.ceil(0.2 * X.shape[0]))
        # the excluded fifth is the easiest to isolate
        assert scores[violators].max() <= scores[~violators].min() + 1e-12

    def test_offset_is_bound_in_score_space(self):
        X = cluster_samples(seed=10)
        con = train_isolation_forest(X, n_trees=10, contamination=0.1, seed=11)
        assert np.log2(-con.offset) == pytest.approx(con.bound, abs=1e-12)

    def test_contamination_validation(self):
        with pytest.raises(ValueError):
            train_isolation_forest(cluster_samples(), contamination=0.0)
        with pytest.raises(ValueError):
            train_isolation_forest(cluster_samples(), contamination=0.7)

    def test_serialization_round_trip(self, tmp_path):
        X = cluster_samples(seed=12)
        con = train_isolation_forest(X, n_trees=10, contamination=0.2, seed=13)
        path = tmp_path / "iso.json"
        serialize_isolation(con, path)
        loaded = deserialize_isolation(path)
        probe = np.random.default_rng(14).random((50, 2))
        assert np.allclose(
            con.forest.path_score(probe), loaded.forest.path_score(probe), atol=0
        )
        assert loaded.bound == con.bound
        assert loaded.direction == con.direction


def iso_problem(direction="le", contamination=0.2):
    ds = generate_synthetic(SyntheticSpec(n=300, n_continuous=2, noise=0.1), seed=30)
    forest = train_forest(ds, ForestConfig(n_trees=5, max_depth=2), seed=31)
    x0 = ds.X[forest.predict(ds.X) == 0][0]
    con = train_isolation_forest(
        ds.X[ds.y == 1], n_trees=5, contamination=contamination, seed=32, direction=direction
    )
    return CounterfactualProblem(
        forest=forest, x0=x0, schema=ds.schema, min_votes=3, plausibility=con
    )


class TestSolverIntegration:
    @pytest.mark.parametrize("direction", ["le", "ge"])
    def test_iso_constraint_oracle_agreement(self, direction):
        prob = iso_problem(direction)
        got = solve_counterfactual(prob)
        want = brute_force_counterfactual(prob)
        assert got.objective == pytest.approx(want.objective, abs=1e-9)
        assert got.x.tolist() == pytest.approx(want.x.tolist(), abs=1e-12)

    def test_iso_constraint_satisfied_when_nu_zero(self):
        prob = iso_problem("ge")
        exp = solve_counterfactual(prob)
        if exp.nu == 0:
            assert prob.plausibility.satisfied(exp.x[None, :])[0]

    def test_lof_oracle_agreement(self):
        ds = generate_synthetic(SyntheticSpec(n=120, n_continuous=2, noise=0.1), seed=33)
        forest = train_forest(ds, ForestConfig(n_trees=5, max_depth=2), seed=34)
        x0 = ds.X[forest.predict(ds.X) == 0][0]
        from forestcf.data import DistanceWeights

        w = DistanceWeights.for_schema(ds.schema)
        for lam in (1e-2, 1.0, 10.0):
            pen = lof_penalty(
                ds.X[ds.y == 1], x0, n_anchors=5, weight=lam, feature_weights=w.w
            )
            prob = CounterfactualProblem(
                forest=forest,
                x0=x0,
                schema=ds.schema,
                min_votes=3,
                weights=w,
                plausibility=pen,
            )
            got = solve_counterfactual(prob)
            want = brute_force_counterfactual(prob)
            assert got.objective == pytest.approx(want.objective, abs=1e-9)

    def test_zero_weight_recovers_unpenalized_solution(self):
        ds = generate_synthetic(SyntheticSpec(n=120, n_continuous=2, noise=0.1), seed=35)
        forest = train_forest(ds, ForestConfig(n_trees=5, max_depth=2), seed=36)
        x0 = ds.X[forest.predict(ds.X) == 0][0]
        base = solve_counterfactual(
            CounterfactualProblem(forest=forest, x0=x0, schema=ds.schema, min_votes=3)
        )
        pen = lof_penalty(ds.X[ds.y == 1], x0, n_anchors=5, weight=0.0)
        with_pen = solve_counterfactual(
            CounterfactualProblem(
                forest=forest, x0=x0, schema=ds.schema, min_votes=3, plausibility=pen
            )
        )
        assert with_pen.distance == pytest.approx(base.distance, abs=1e-12)

    def test_distance_non_decreasing_in_penalty_weight(self):
        ds = generate_synthetic(SyntheticSpec(n=150, n_continuous=2, noise=0.1), seed=37)
        forest = train_forest(ds, ForestConfig(n_trees=11, max_depth=3), seed=38)
        x0 = ds.X[forest.predict(ds.X) == 0][0]
        dists = []
        for lam in (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2):
            pen = lof_penalty(ds.X[ds.y == 1], x0, n_anchors=10, weight=lam)
            exp = solve_counterfactual(
                CounterfactualProblem(
                    forest=forest, x0=x0, schema=ds.schema, min_votes=6, plausibility=pen
                )
            )
            dists.append(exp.distance)
        assert all(a <= b + 1e-9 for a, b in zip(dists, dists[1:]))

    def test_chosen_anchor_is_true_nearest(self):
        ds = generate_synthetic(SyntheticSpec(n=150, n_continuous=2, noise=0.1), seed=39)
        forest = train_forest(ds, ForestConfig(n_trees=11, max_depth=3), seed=40)
        x0 = ds.X[forest.predict(ds.X) == 0][0]
        pen = lof_penalty(ds.X[ds.y == 1], x0, n_anchors=10, weight=0.5)
        exp = solve_counterfactual(
            CounterfactualProblem(
                forest=forest, x0=x0, schema=ds.schema, min_votes=6, plausibility=pen
            )
        )
        i_star = pen.anchor_of(exp.x)
        dists = np.abs(exp.x[None, :] - pen.anchors) @ pen.feature_weights
        assert dists[i_star] == dists.min()
        assert exp.plausibility_penalty == pytest.approx(
            pen.weight * pen.lrd[i_star] * max(pen.delta[i_star], dists[i_star]), abs=1e-12
        )


class TestLofConstruction:
    def test_mutual_nearest_pair_penalty_is_weight(self):
        # anchors A and B are each other's nearest neighbor at distance 0.1,
        # so the reachability floor at either anchor is exactly Delta/Delta
        X = np.array(
            [[0.2, 0.2], [0.2, 0.3], [0.8, 0.8], [0.8, 0.7], [0.5, 0.9], [0.1, 0.8]]
        )
        pen = lof_penalty(X, x0=np.array([0.21, 0.2]), n_anchors=2, weight=3.0)
        assert pen.penalty(np.array([0.2, 0.2])) == pytest.approx(3.0, abs=1e-12)

    def test_duplicate_points_cap_density(self):
        X = np.array([[0.1, 0.1], [0.1, 0.1], [0.5, 0.5], [0.9, 0.9], [0.3, 0.7]])
        pen = lof_penalty(X, x0=np.array([0.1, 0.1]), n_anchors=2, weight=1.0)
        assert pen.lrd.max() == pytest.approx(1e6)

    def test_needs_enough_samples(self):
        with pytest.raises(ValueError, match="at least"):
            lof_penalty(np.random.rand(5, 2), np.zeros(2), n_anchors=10)

    def test_anchor_count_and_order(self):
        rng = np.random.default_rng(41)
        X = rng.random((40, 2))
        x0 = np.array([0.5, 0.5])
        pen = lof_penalty(X, x0, n_anchors=10, weight=1.0)
        assert pen.anchors.shape == (10, 2)
        d_all = np.sort(np.abs(X - x0) @ pen.feature_weights)
        d_anchor = np.sort(np.abs(pen.anchors - x0) @ pen.feature_weights)
        assert np.allclose(d_anchor, d_all[:10])
