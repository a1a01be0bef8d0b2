"""Input validation helpers shared by the estimator-facing API."""

from __future__ import annotations

import numpy as np


def as_float_matrix(x, name: str = "X") -> np.ndarray:
    """Coerce to a 2-D float64 array of finite values."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_window_batch(x, t_in: int, name: str = "windows") -> np.ndarray:
    """Coerce to (B, N, T_in); a single (N, T_in) window gains a batch axis."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (B, N, T) or (N, T), got shape {arr.shape}")
    if arr.shape[-1] != t_in:
        raise ValueError(f"{name} has window length {arr.shape[-1]}, expected {t_in}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_ratios(ratios) -> tuple[float, float, float]:
    r = tuple(float(v) for v in ratios)
    if len(r) != 3 or any(v < 0 for v in r):
        raise ValueError(f"ratios must be three nonnegative reals, got {ratios}")
    if abs(sum(r) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(r)}")
    return r


def check_positive_int(value, name: str) -> int:
    v = int(value)
    if v <= 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return v
