"""Input validation helpers shared across the package.

Follows the sklearn convention of small check_* functions that either
return a canonical ndarray or raise ValueError with a readable message.
"""

from __future__ import annotations

import numpy as np


def as_float_array(x, name="array", dtype=np.float32) -> np.ndarray:
    """Coerce to a contiguous float ndarray, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_samples(x, name="samples") -> np.ndarray:
    """Validate a 1-D sample buffer: finite float32, any length >= 0."""
    arr = as_float_array(x, name)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def check_sample_rate(sample_rate) -> int:
    sr = int(sample_rate)
    if sr <= 0:
        raise ValueError(f"sample_rate must be positive, got {sample_rate}")
    return sr


def check_embedding_matrix(x, name="embeddings", dtype=np.float32) -> np.ndarray:
    """Validate an (n_frames, dim) matrix of finite floats."""
    arr = as_float_array(x, name, dtype=dtype)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def check_square_symmetric(m, name="matrix", tol=1e-8) -> np.ndarray:
    arr = as_float_array(m, name, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be square, got shape {arr.shape}")
    if arr.shape[0] and np.max(np.abs(arr - arr.T)) > tol:
        raise ValueError(f"{name} is not symmetric within {tol}")
    return arr


def check_probability(p, name="probability") -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {p}")
    return p


def check_positive(value, name="value") -> float:
    v = float(value)
    if not v > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return v


def check_non_negative(value, name="value") -> float:
    v = float(value)
    if v < 0:
        raise ValueError(f"{name} must be non-negative, got {value}")
    return v
