import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forestcf.data import (
    Actionability,
    DataError,
    Dataset,
    DatasetSchema,
    DistanceWeights,
    FeatureKind,
    FeatureSpec,
    SchemaError,
    SyntheticSpec,
    denormalize,
    generate_synthetic,
    load_dataset,
    load_schema,
    normalize,
)


def make_schema(*specs):
    return DatasetSchema(features=tuple(specs), target="label")


MIXED_SCHEMA = make_schema(
    FeatureSpec("income", FeatureKind.CONTINUOUS, raw_range=(10.0, 30.0)),
    FeatureSpec("accounts", FeatureKind.DISCRETE, raw_range=(0.0, 4.0)),
    FeatureSpec("owns_home", FeatureKind.BINARY),
    FeatureSpec("job_blue", FeatureKind.CATEGORICAL, group="job"),
    FeatureSpec("job_white", FeatureKind.CATEGORICAL, group="job"),
)


class TestSchema:
    def test_basic_properties(self):
        s = MIXED_SCHEMA
        assert s.d == 5
        assert s.n_continuous == 1
        assert s.groups == {"job": (3, 4)}
        assert s.index_of("owns_home") == 2

    def test_duplicate_names_rejected(self):
        with pytest.raises(SchemaError):
            make_schema(
                FeatureSpec("a", FeatureKind.BINARY), FeatureSpec("a", FeatureKind.BINARY)
            )

    def test_target_collision_rejected(self):
        with pytest.raises(SchemaError):
            DatasetSchema(
                features=(FeatureSpec("label", FeatureKind.BINARY),), target="label"
            )

    def test_singleton_group_rejected(self):
        with pytest.raises(SchemaError):
            make_schema(
                FeatureSpec("only", FeatureKind.CATEGORICAL, group="g"),
                FeatureSpec("other", FeatureKind.BINARY),
            )

    def test_degenerate_range_rejected(self):
        with pytest.raises(SchemaError):
            FeatureSpec("x", FeatureKind.CONTINUOUS, raw_range=(3.0, 3.0))

    def test_unresolved_range_rejected_at_normalize(self):
        schema = make_schema(FeatureSpec("x", FeatureKind.CONTINUOUS))
        with pytest.raises(SchemaError, match="never resolved"):
            normalize(np.array([[0.5]]), schema)


class TestNormalize:
    def test_midpoint_maps_to_half(self):
        schema = make_schema(FeatureSpec("x", FeatureKind.CONTINUOUS, raw_range=(10.0, 30.0)))
        assert normalize(np.array([20.0]), schema)[0] == 0.5

    def test_range_endpoints(self):
        schema = make_schema(FeatureSpec("x", FeatureKind.CONTINUOUS, raw_range=(10.0, 30.0)))
        assert normalize(np.array([10.0]), schema)[0] == 0.0
        assert normalize(np.array([30.0]), schema)[0] == 1.0

    def test_discrete_grid_point(self):
        schema = make_schema(FeatureSpec("k", FeatureKind.DISCRETE, raw_range=(0.0, 4.0)))
        assert normalize(np.array([3.0]), schema)[0] == 0.75

    def test_binary_untouched(self):
        schema = make_schema(FeatureSpec("b", FeatureKind.BINARY))
        vals = np.array([[0.0], [1.0], [1.0]])
        assert (normalize(vals, schema) == vals).all()

    def test_strict_mode_rejects_out_of_range(self):
        schema = make_schema(FeatureSpec("x", FeatureKind.CONTINUOUS, raw_range=(0.0, 1.0)))
        with pytest.raises(DataError, match="row 0.*'x'"):
            normalize(np.array([[2.0]]), schema)

    def test_lenient_mode_clamps_with_warning(self):
        schema = make_schema(FeatureSpec("x", FeatureKind.CONTINUOUS, raw_range=(0.0, 1.0)))
        with pytest.warns(UserWarning, match="clamping"):
            out = normalize(np.array([[2.0]]), schema, mode="lenient")
        assert out[0, 0] == 1.0

    @settings(max_examples=100, deadline=None)
    @given(
        value=st.floats(min_value=10.0, max_value=30.0, allow_nan=False),
    )
    def test_round_trip_within_tolerance(self, value):
        schema = make_schema(FeatureSpec("x", FeatureKind.CONTINUOUS, raw_range=(10.0, 30.0)))
        back = denormalize(normalize(np.array([value]), schema), schema)[0]
        assert abs(back - value) <= 1e-12


class TestLoadDataset:
    def write(self, tmp_path, text, name="data.csv"):
        p = tmp_path / name
        p.write_text(textwrap.dedent(text))
        return p

    def write_schema(self, tmp_path):
        p = tmp_path / "schema.yaml"
        p.write_text(
            textwrap.dedent(
                """
                target: label
                features:
                  - name: income
                    kind: continuous
                    range: [10, 30]
                    actionability: increase-only
                  - name: owns_home
                    kind: binary
                  - name: job_blue
                    kind: categorical
                    group: job
                  - name: job_white
                    kind: categorical
                    group: job
                """
            )
        )
        return p

    def test_load_and_normalize(self, tmp_path):
        csv_p = self.write(
            tmp_path,
            """\
            income,owns_home,job_blue,job_white,label
            10,0,1,0,0
            20,1,0,1,1
            30,1,1,0,1
            """,
        )
        ds = load_dataset(csv_p, self.write_schema(tmp_path))
        assert ds.n == 3
        assert ds.X[:, 0].tolist() == [0.0, 0.5, 1.0]
        assert ds.X[:, 1].tolist() == [0.0, 1.0, 1.0]
        assert ds.y.tolist() == [0, 1, 1]
        assert ds.schema.features[0].actionability is Actionability.INCREASE_ONLY

    def test_missing_column(self, tmp_path):
        csv_p = self.write(tmp_path, "income,owns_home,label\n10,0,0\n")
        with pytest.raises(DataError, match="missing columns"):
            load_dataset(csv_p, self.write_schema(tmp_path))

    def test_unparseable_cell_names_row_and_column(self, tmp_path):
        csv_p = self.write(
            tmp_path,
            """\
            income,owns_home,job_blue,job_white,label
            10,0,1,0,0
            oops,1,0,1,1
            """,
        )
        with pytest.raises(DataError, match="row 1, column 'income'"):
            load_dataset(csv_p, self.write_schema(tmp_path))

    def test_one_hot_violation_names_row(self, tmp_path):
        csv_p = self.write(
            tmp_path,
            """\
            income,owns_home,job_blue,job_white,label
            10,0,1,0,0
            20,1,0,0,1
            """,
        )
        with pytest.raises(DataError, match="row 1.*'job'"):
            load_dataset(csv_p, self.write_schema(tmp_path))

    def test_bad_label(self, tmp_path):
        csv_p = self.write(
            tmp_path,
            """\
            income,owns_home,job_blue,job_white,label
            10,0,1,0,2
            """,
        )
        with pytest.raises(DataError, match="label"):
            load_dataset(csv_p, self.write_schema(tmp_path))

    def test_inferred_range_and_constant_rejection(self, tmp_path):
        schema_p = tmp_path / "s.yaml"
        schema_p.write_text(
            "target: label\nfeatures:\n  - name: x\n    kind: continuous\n"
        )
        csv_p = self.write(tmp_path, "x,label\n1,0\n3,1\n", name="a.csv")
        ds = load_dataset(csv_p, schema_p)
        assert ds.schema.features[0].raw_range == (1.0, 3.0)
        const_p = self.write(tmp_path, "x,label\n2,0\n2,1\n", name="b.csv")
        with pytest.raises(DataError, match="constant"):
            load_dataset(const_p, schema_p)

    def test_load_schema_validates(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("features: []\n")
        with pytest.raises(SchemaError):
            load_schema(p)


class TestDistanceWeights:
    def test_defaults_follow_feature_kinds(self):
        w = DistanceWeights.for_schema(MIXED_SCHEMA)
        assert w.w.tolist() == [1.0, 0.25, 0.25, 0.25, 0.25]

    def test_unit_change_of_discrete_feature_costs_quarter(self):
        w = DistanceWeights.for_schema(MIXED_SCHEMA)
        a = np.zeros(5)
        b = a.copy()
        b[2] = 1.0  # flip the binary feature by a full unit
        assert w.distance(a, b) == 0.25

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            DistanceWeights(np.array([-1.0]))


class TestSynthetic:
    def test_same_seed_bitwise_identical(self):
        spec = SyntheticSpec(n=200, n_continuous=2, n_binary=2, noise=0.1)
        a = generate_synthetic(spec, seed=7)
        b = generate_synthetic(spec, seed=7)
        assert (a.X == b.X).all()
        assert (a.y == b.y).all()

    def test_noiseless_linear_labels_exact(self):
        spec = SyntheticSpec(n=500, n_continuous=2, noise=0.0, boundary=("linear", None, 1.0))
        ds = generate_synthetic(spec, seed=3)
        expected = (ds.X[:, 0] + ds.X[:, 1] >= 1.0).astype(int)
        assert (ds.y == expected).all()

    def test_diagonal_boundary_roughly_balanced(self):
        # Monte Carlo: P(x0 + x1 >= 1) = 1/2 under the uniform square.
        spec = SyntheticSpec(n=1000, n_continuous=2, boundary=("linear", None, 1.0))
        ds = generate_synthetic(spec, seed=11)
        balance = ds.y.mean()
        assert 0.4 <= balance <= 0.6

    def test_box_boundary(self):
        spec = SyntheticSpec(n=400, n_continuous=2, boundary=("box", 0.25, 0.75))
        ds = generate_synthetic(spec, seed=5)
        inside = ((ds.X[:, :2] >= 0.25) & (ds.X[:, :2] <= 0.75)).all(axis=1)
        assert (ds.y == inside.astype(int)).all()

    def test_degenerate_specs_rejected(self):
        with pytest.raises(ValueError):
            SyntheticSpec(n=10)
        with pytest.raises(ValueError):
            SyntheticSpec(n=100, n_continuous=0, n_binary=0)
        with pytest.raises(ValueError):
            SyntheticSpec(n=100, noise=0.5)

    def test_dataset_immutable(self):
        ds = generate_synthetic(SyntheticSpec(n=50), seed=1)
        with pytest.raises(ValueError):
            ds.X[0, 0] = 2.0


class TestDatasetValidation:
    def test_label_domain_enforced(self):
        schema = make_schema(FeatureSpec("b", FeatureKind.BINARY))
        with pytest.raises(DataError):
            Dataset(schema=schema, X=np.array([[0.0]]), y=np.array([2]))

    def test_unit_interval_enforced(self):
        schema = make_schema(FeatureSpec("x", FeatureKind.CONTINUOUS, raw_range=(0.0, 1.0)))
        with pytest.raises(DataError):
            Dataset(schema=schema, X=np.array([[1.5]]), y=np.array([0]))
