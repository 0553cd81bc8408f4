"""Input validation helpers.

Small checks shared by the numeric kernels and the estimator surface. All
helpers return the validated (possibly converted) array so they can be used
inline.
"""

import numpy as np

from .errors import NonFiniteError, ShapeError


def check_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or infinite values")
    return arr


def check_matrix(arr, name: str = "matrix", dtype=None) -> np.ndarray:
    a = np.asarray(arr, dtype=dtype)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return check_finite(a, name)


def check_vector(arr, name: str = "vector", dtype=None) -> np.ndarray:
    a = np.asarray(arr, dtype=dtype)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {a.shape}")
    if a.shape[0] < 1:
        raise ShapeError(f"{name} must have at least one element")
    return check_finite(a, name)


def check_same_length(a: np.ndarray, b: np.ndarray, name_a: str, name_b: str) -> None:
    if a.shape[0] != b.shape[0]:
        raise ShapeError(
            f"{name_a} (length {a.shape[0]}) and {name_b} (length {b.shape[0]}) "
            "must have equal length"
        )
