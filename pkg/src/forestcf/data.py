"""Typed tabular datasets: schemas, normalization, weights, synthetic generators.

Every downstream component works on feature matrices normalized to [0, 1]:
continuous and discrete-numeric features are min-max scaled by their declared
raw range, binary and one-hot columns pass through untouched.  The schema
carries per-feature kind, actionability and the raw range needed to report
explanations back in original units.
"""

from __future__ import annotations

import csv
import enum
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

__all__ = [
    "FeatureKind",
    "Actionability",
    "FeatureSpec",
    "DatasetSchema",
    "Dataset",
    "DistanceWeights",
    "DataError",
    "SchemaError",
    "load_schema",
    "load_dataset",
    "normalize",
    "denormalize",
    "SyntheticSpec",
    "generate_synthetic",
]


class DataError(ValueError):
    """A data file violates its schema (bad cell, bad group, bad label...)."""


class SchemaError(ValueError):
    """A schema definition is internally inconsistent."""


class FeatureKind(str, enum.Enum):
    BINARY = "binary"
    CATEGORICAL = "categorical"
    DISCRETE = "discrete"
    CONTINUOUS = "continuous"


class Actionability(str, enum.Enum):
    FREE = "free"
    FIXED = "fixed"
    INCREASE_ONLY = "increase-only"
    DECREASE_ONLY = "decrease-only"


#: Default weight applied to unit changes of non-continuous features so their
#: cost is comparable to continuous ones under the weighted l1 distance.
DISCRETE_WEIGHT = 0.25


@dataclass(frozen=True)
class FeatureSpec:
    """One column of the feature matrix.

    ``raw_range`` is required for discrete/continuous kinds (min < max);
    ``group`` ties one-hot columns of a single categorical attribute together.
    """

    name: str
    kind: FeatureKind
    actionability: Actionability = Actionability.FREE
    raw_range: tuple[float, float] | None = None
    group: str | None = None

    def __post_init__(self) -> None:
        # A missing range on a numeric kind means "infer from the data at
        # load time"; it must be resolved before normalization.
        if self.raw_range is not None:
            lo, hi = self.raw_range
            if not lo < hi:
                raise SchemaError(
                    f"feature {self.name!r}: raw range must satisfy min < max, got {self.raw_range}"
                )
            if self.kind is FeatureKind.DISCRETE and (lo != int(lo) or hi != int(hi)):
                raise SchemaError(f"feature {self.name!r}: discrete range must be integral")
        if self.kind is FeatureKind.CATEGORICAL and self.group is None:
            raise SchemaError(f"feature {self.name!r}: categorical needs a one-hot group id")
        if self.kind is not FeatureKind.CATEGORICAL and self.group is not None:
            raise SchemaError(f"feature {self.name!r}: only categorical features carry a group")

    @property
    def span(self) -> float:
        if self.raw_range is None:
            return 1.0
        return self.raw_range[1] - self.raw_range[0]

    @property
    def n_levels(self) -> int | None:
        """Grid size for discrete features (binary counts as 2), else None."""
        if self.kind is FeatureKind.DISCRETE:
            lo, hi = self.raw_range
            return int(hi - lo) + 1
        if self.kind in (FeatureKind.BINARY, FeatureKind.CATEGORICAL):
            return 2
        return None


@dataclass(frozen=True)
class DatasetSchema:
    features: tuple[FeatureSpec, ...]
    target: str

    def __post_init__(self) -> None:
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        if self.target in names:
            raise SchemaError(f"target {self.target!r} collides with a feature name")
        if not self.features:
            raise SchemaError("schema needs at least one feature")
        for gid, cols in self.groups.items():
            if len(cols) < 2:
                raise SchemaError(f"one-hot group {gid!r} must span at least two columns")

    @property
    def d(self) -> int:
        return len(self.features)

    @property
    def n_continuous(self) -> int:
        return sum(1 for f in self.features if f.kind is FeatureKind.CONTINUOUS)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    @property
    def groups(self) -> dict[str, tuple[int, ...]]:
        """Map of one-hot group id to the column indices it spans."""
        out: dict[str, list[int]] = {}
        for j, f in enumerate(self.features):
            if f.group is not None:
                out.setdefault(f.group, []).append(j)
        return {g: tuple(cols) for g, cols in out.items()}

    def index_of(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class Dataset:
    """Normalized feature matrix plus binary labels, immutable once built."""

    schema: DatasetSchema
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=int)
        if X.ndim != 2 or X.shape[1] != self.schema.d:
            raise DataError(f"X must be n x {self.schema.d}, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DataError("y must have one label per row")
        if not np.isin(y, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        if X.size and (X.min() < -1e-12 or X.max() > 1 + 1e-12):
            raise DataError("normalized features must lie in [0, 1]")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class DistanceWeights:
    """Per-feature weights for the l1 distance between observations."""

    w: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 1 or (w < 0).any():
            raise ValueError("weights must be a non-negative vector")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @classmethod
    def for_schema(cls, schema: DatasetSchema, *, discrete_weight: float = DISCRETE_WEIGHT):
        w = np.array(
            [1.0 if f.kind is FeatureKind.CONTINUOUS else discrete_weight for f in schema.features]
        )
        return cls(w)

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.abs(np.asarray(a, float) - np.asarray(b, float)) @ self.w)


# ---------------------------------------------------------------------------
# schema / CSV loading


def _parse_feature(entry: dict) -> FeatureSpec:
    try:
        name = entry["name"]
        kind = FeatureKind(entry["kind"])
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"bad feature entry {entry!r}: {exc}") from exc
    act = Actionability(entry.get("actionability", "free"))
    rng = entry.get("range")
    if rng is not None:
        rng = (float(rng[0]), float(rng[1]))
    return FeatureSpec(
        name=name, kind=kind, actionability=act, raw_range=rng, group=entry.get("group")
    )


def load_schema(path: str | Path) -> DatasetSchema:
    """Read a YAML schema file (grammar documented in docs/schema.md)."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or "target" not in doc or "features" not in doc:
        raise SchemaError(f"{path}: schema file needs 'target' and 'features' keys")
    features = tuple(_parse_feature(e) for e in doc["features"])
    return DatasetSchema(features=features, target=str(doc["target"]))


def _with_inferred_ranges(schema: DatasetSchema, raw: np.ndarray) -> DatasetSchema:
    """Fill missing raw ranges from the loaded data (constant columns rejected)."""
    feats = []
    for j, f in enumerate(schema.features):
        if f.kind in (FeatureKind.DISCRETE, FeatureKind.CONTINUOUS) and f.raw_range is None:
            lo, hi = float(raw[:, j].min()), float(raw[:, j].max())
            if lo == hi:
                raise DataError(f"feature {f.name!r} is constant; cannot infer a range")
            feats.append(
                FeatureSpec(f.name, f.kind, f.actionability, (lo, hi), f.group)
            )
        else:
            feats.append(f)
    return DatasetSchema(features=tuple(feats), target=schema.target)


def load_dataset(
    csv_path: str | Path,
    schema: DatasetSchema | str | Path,
    *,
    mode: str = "strict",
) -> Dataset:
    """Load an RFC-4180 CSV with a header row against a schema.

    Cells are validated per feature kind, one-hot groups must sum to one per
    row, labels must be 0/1.  Errors name the offending row and column.
    """
    if not isinstance(schema, DatasetSchema):
        schema = load_schema(schema)
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{csv_path}: empty file") from None
        rows = list(reader)
    missing = [c for c in (*schema.names, schema.target) if c not in header]
    if missing:
        raise DataError(f"{csv_path}: missing columns {missing}")
    col_idx = {c: header.index(c) for c in header}

    n = len(rows)
    raw = np.empty((n, schema.d), dtype=float)
    y = np.empty(n, dtype=int)
    for i, row in enumerate(rows):
        for j, f in enumerate(schema.features):
            cell = row[col_idx[f.name]]
            try:
                raw[i, j] = float(cell)
            except ValueError:
                raise DataError(
                    f"row {i}, column {f.name!r}: cannot parse {cell!r}"
                ) from None
        label_cell = row[col_idx[schema.target]]
        try:
            label = float(label_cell)
        except ValueError:
            raise DataError(f"row {i}, column {schema.target!r}: cannot parse {label_cell!r}")
        if label not in (0.0, 1.0):
            raise DataError(f"row {i}: label must be 0 or 1, got {label_cell!r}")
        y[i] = int(label)

    schema = _with_inferred_ranges(schema, raw)
    _check_kinds(raw, schema)
    X = normalize(raw, schema, mode=mode)
    return Dataset(schema=schema, X=X, y=y)


def _check_kinds(raw: np.ndarray, schema: DatasetSchema) -> None:
    for j, f in enumerate(schema.features):
        col = raw[:, j]
        if f.kind in (FeatureKind.BINARY, FeatureKind.CATEGORICAL):
            bad = np.where(~np.isin(col, (0.0, 1.0)))[0]
            if bad.size:
                raise DataError(
                    f"row {bad[0]}, column {f.name!r}: {f.kind.value} value must be 0 or 1"
                )
        elif f.kind is FeatureKind.DISCRETE:
            bad = np.where(col != np.round(col))[0]
            if bad.size:
                raise DataError(
                    f"row {bad[0]}, column {f.name!r}: discrete value must be an integer"
                )
    for gid, cols in schema.groups.items():
        sums = raw[:, list(cols)].sum(axis=1)
        bad = np.where(sums != 1.0)[0]
        if bad.size:
            raise DataError(f"row {bad[0]}: one-hot group {gid!r} does not sum to 1")


def normalize(raw: np.ndarray, schema: DatasetSchema, *, mode: str = "strict") -> np.ndarray:
    """Min-max scale continuous/discrete columns to [0, 1] by declared range.

    ``mode='strict'`` rejects out-of-range values naming row and column;
    ``mode='lenient'`` clamps them and emits a warning.
    """
    if mode not in ("strict", "lenient"):
        raise ValueError(f"mode must be 'strict' or 'lenient', got {mode!r}")
    raw = np.asarray(raw, dtype=float)
    squeeze = raw.ndim == 1
    if squeeze:
        raw = raw[None, :]
    if raw.shape[1] != schema.d:
        raise DataError(f"expected {schema.d} columns, got {raw.shape[1]}")
    X = raw.copy()
    for j, f in enumerate(schema.features):
        if f.kind in (FeatureKind.DISCRETE, FeatureKind.CONTINUOUS):
            if f.raw_range is None:
                raise SchemaError(f"feature {f.name!r}: raw range was never resolved")
            lo, hi = f.raw_range
            col = X[:, j]
            out = np.where((col < lo) | (col > hi))[0]
            if out.size:
                if mode == "strict":
                    raise DataError(
                        f"row {out[0]}, column {f.name!r}: value {col[out[0]]!r} "
                        f"outside declared range [{lo}, {hi}]"
                    )
                warnings.warn(
                    f"clamping {out.size} value(s) of {f.name!r} into [{lo}, {hi}]",
                    stacklevel=2,
                )
                col = np.clip(col, lo, hi)
            X[:, j] = (col - lo) / (hi - lo)
    return X[0] if squeeze else X


def denormalize(X: np.ndarray, schema: DatasetSchema) -> np.ndarray:
    """Invert :func:`normalize`, mapping unit-scale values back to raw units."""
    X = np.asarray(X, dtype=float)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[None, :]
    raw = X.copy()
    for j, f in enumerate(schema.features):
        if f.kind in (FeatureKind.DISCRETE, FeatureKind.CONTINUOUS):
            lo, hi = f.raw_range
            raw[:, j] = lo + X[:, j] * (hi - lo)
    return raw[0] if squeeze else raw


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Controlled generator used by tests and desk-scale experiments.

    Continuous features are uniform on [0, 1]; binary features are fair coin
    flips.  Labels come from the declared boundary over the continuous block
    and are flipped independently with probability ``noise``.

    ``boundary``:
      * ``("linear", weights, offset)`` - label 1 iff weights . x_cont >= offset
        (defaults: all-ones weights, offset = n_continuous / 2);
      * ``("box", low, high)`` - label 1 iff every continuous feature lies in
        [low, high].
    """

    n: int
    n_continuous: int = 2
    n_binary: int = 0
    noise: float = 0.0
    boundary: tuple = ("linear", None, None)
    min_class_count: int = 5

    def __post_init__(self) -> None:
        if self.n < 20:
            raise ValueError("need n >= 20")
        if self.n_continuous + self.n_binary < 1:
            raise ValueError("need at least one feature")
        if not 0.0 <= self.noise < 0.5:
            raise ValueError("noise must lie in [0, 0.5)")
        if self.boundary[0] not in ("linear", "box"):
            raise ValueError(f"unknown boundary kind {self.boundary[0]!r}")


def _boundary_labels(spec: SyntheticSpec, X_cont: np.ndarray) -> np.ndarray:
    kind = spec.boundary[0]
    if kind == "linear":
        _, weights, offset = spec.boundary
        if weights is None:
            weights = np.ones(spec.n_continuous)
        weights = np.asarray(weights, dtype=float)
        if offset is None:
            offset = spec.n_continuous / 2.0
        return (X_cont @ weights >= offset).astype(int)
    _, low, high = spec.boundary
    return ((X_cont >= low) & (X_cont <= high)).all(axis=1).astype(int)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Draw a reproducible dataset; identical seeds give identical bits."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n_c, n_b = spec.n_continuous, spec.n_binary
    X_cont = rng.random((spec.n, n_c)) if n_c else np.empty((spec.n, 0))
    X_bin = (
        rng.integers(0, 2, size=(spec.n, n_b)).astype(float) if n_b else np.empty((spec.n, 0))
    )
    if n_c:
        y = _boundary_labels(spec, X_cont)
    else:
        y = X_bin[:, 0].astype(int)
    if spec.noise > 0:
        flips = rng.random(spec.n) < spec.noise
        y = np.where(flips, 1 - y, y)
    counts = np.bincount(y, minlength=2)
    if counts.min() < spec.min_class_count:
        raise DataError(
            f"degenerate draw: class counts {counts.tolist()} below {spec.min_class_count}"
        )
    features = [
        FeatureSpec(f"c{j}", FeatureKind.CONTINUOUS, raw_range=(0.0, 1.0)) for j in range(n_c)
    ] + [FeatureSpec(f"b{j}", FeatureKind.BINARY) for j in range(n_b)]
    schema = DatasetSchema(features=tuple(features), target="label")
    return Dataset(schema=schema, X=np.hstack([X_cont, X_bin]), y=y)
