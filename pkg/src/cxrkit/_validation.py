"""Input validation helpers shared across the public surfaces."""

from __future__ import annotations

import numpy as np

from .exceptions import NumericsError, ShapeError


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    """Coerce to a finite float64 array, optionally enforcing a rank."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} contains non-finite values")
    return arr


def as_binary_array(y, name: str, ndim: int | None = None) -> np.ndarray:
    """Coerce to a float64 array of {0, 1} values."""
    arr = np.asarray(y, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.size and not np.all((arr == 0.0) | (arr == 1.0)):
        raise ShapeError(f"{name} must contain only 0/1 values")
    return arr


def check_same_length(a: np.ndarray, b: np.ndarray, name_a: str, name_b: str) -> None:
    if len(a) != len(b):
        raise ShapeError(f"{name_a} has length {len(a)} but {name_b} has length {len(b)}")


def check_in_unit_interval(value: float, name: str, *, open_sided: bool = False) -> float:
    v = float(value)
    ok = 0.0 < v < 1.0 if open_sided else 0.0 <= v <= 1.0
    if not ok:
        raise ValueError(f"{name} must lie in the unit interval, got {v}")
    return v
