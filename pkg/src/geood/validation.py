"""Input validation helpers shared by the functional API and the estimators."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from geood.exceptions import DataError

DETECTORS = ("MD", "RMD", "MMD")


def check_features(X, *, name: str = "X", expected_dim: int | None = None) -> np.ndarray:
    """Return ``X`` as a C-contiguous float64 2-D array with finite entries.

    Raises:
        DataError: wrong rank, empty, dimension mismatch, or a non-finite
            entry (the first offending row index is reported).
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"{name} must be 2-D, got shape {arr.shape}")
    n, d = arr.shape
    if n < 1 or d < 1:
        raise DataError(f"{name} must have N >= 1 and d >= 1, got shape {arr.shape}")
    if expected_dim is not None and d != expected_dim:
        raise DataError(f"{name} has dimension {d}, expected {expected_dim}")
    bad = ~np.isfinite(arr)
    if bad.any():
        row = int(np.argwhere(bad.any(axis=1))[0, 0])
        raise DataError(f"{name} contains a non-finite entry in row {row}")
    return np.ascontiguousarray(arr)


def check_labels(y, n_rows: int, *, name: str = "labels") -> np.ndarray:
    labels = np.asarray(y)
    if labels.ndim != 1 or labels.shape[0] != n_rows:
        raise DataError(f"{name} must be 1-D of length {n_rows}, got shape {labels.shape}")
    if labels.size and not np.all(np.equal(np.mod(labels, 1), 0)):
        raise DataError(f"{name} must be integers")
    return labels.astype(np.int64)


def check_detector(detector: str) -> str:
    key = str(detector).upper()
    if key not in DETECTORS:
        raise DataError(f"unknown detector {detector!r}; expected one of {', '.join(DETECTORS)}")
    return key


def check_scores(scores: Iterable[float], name: str) -> np.ndarray:
    arr = np.asarray(list(scores) if not isinstance(scores, np.ndarray) else scores, dtype=np.float64)
    arr = arr.ravel()
    if arr.size == 0:
        raise DataError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite scores")
    return arr


def check_square_symmetric(M, *, tol: float = 1e-8, name: str = "M") -> np.ndarray:
    arr = np.asarray(M, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
        raise DataError(f"{name} must be a non-empty square matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    scale = max(1.0, float(np.max(np.abs(arr))))
    if np.max(np.abs(arr - arr.T)) > tol * scale:
        raise DataError(f"{name} is not symmetric within {tol:g}")
    return arr
