"""Small input-validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np


def check_matrix(X, *, n_cols: int | None = None, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got ndim={X.ndim}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    if n_cols is not None and X.shape[1] != n_cols:
        raise ValueError(f"{name} has {X.shape[1]} columns, expected {n_cols}")
    return X


def check_binary_labels(y, *, n_rows: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_rows,):
        raise ValueError(f"y must have shape ({n_rows},), got {y.shape}")
    y = y.astype(np.int64)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y


def check_vector(x, *, size: int | None = None, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if size is not None and x.shape[0] != size:
        raise ValueError(f"{name} has length {x.shape[0]}, expected {size}")
    if not np.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_unit_interval(x, *, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.size and (x.min() < -1e-12 or x.max() > 1 + 1e-12):
        raise ValueError(f"{name} must lie in [0, 1]")
    return x
