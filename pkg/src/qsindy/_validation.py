"""Input validation helpers shared across estimators and data containers."""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["as_float_array", "check_positive", "check_same_length", "read_json_source"]


def read_json_source(source):
    """Return JSON text from a Path, a filename, or a literal JSON string."""
    if isinstance(source, Path):
        return source.read_text()
    if isinstance(source, str):
        stripped = source.lstrip()
        if stripped.startswith("{") or stripped.startswith("["):
            return source
        return Path(source).read_text()
    raise TypeError(f"expected path or JSON string, got {type(source).__name__}")


def as_float_array(values, name="array", ndim=1):
    """Coerce to a contiguous float64 ndarray and reject non-finite entries."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise ValueError(f"{name} contains a non-finite value at flat index {bad}")
    return arr


def check_positive(value, name):
    if not np.all(np.asarray(value) > 0):
        raise ValueError(f"{name} must be strictly positive, got {value}")
    return value


def check_same_length(**named_arrays):
    lengths = {name: len(a) for name, a in named_arrays.items()}
    if len(set(lengths.values())) > 1:
        raise ValueError(f"length mismatch: {lengths}")
    return next(iter(lengths.values()))
