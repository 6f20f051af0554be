"""Input validation helpers shared by the public API surface."""

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < 1:
        raise ValueError(f"{name} must be >= 1, got {value}")
    return int(value)


def as_float_array(x, name: str, ndim: int | None = None):
    """Coerce to a float ndarray (float32 kept, everything else promoted to float64)."""
    arr = np.asarray(x)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


def check_finite(x, name: str):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains NaN or Inf")
    return x


def check_vector(x, name: str, length: int | None = None):
    arr = as_float_array(x, name, ndim=1)
    if length is not None and arr.shape[0] != length:
        raise ValueError(f"{name} must have length {length}, got {arr.shape[0]}")
    return arr


def check_feature_map(x, name: str = "x", channels: int | None = None,
                      segments: int | None = None):
    """Validate a (channels x segments) feature map: 2-D, finite, optional exact dims."""
    arr = as_float_array(x, name, ndim=2)
    check_finite(arr, name)
    if channels is not None and arr.shape[0] != channels:
        raise ValueError(f"{name} must have {channels} channels, got {arr.shape[0]}")
    if segments is not None and arr.shape[1] != segments:
        raise ValueError(f"{name} must have {segments} temporal segments, got {arr.shape[1]}")
    return arr


def check_hash_vector(h, name: str, length: int, d: int):
    arr = np.asarray(h)
    if arr.ndim != 1 or arr.shape[0] != length:
        raise ValueError(f"{name} must be a length-{length} index vector, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise TypeError(f"{name} must hold integers, got dtype {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() >= d):
        raise ValueError(f"{name} entries must lie in [0, {d})")
    return arr.astype(np.int64, copy=False)


def check_sign_array(s, name: str, shape: tuple) -> np.ndarray:
    arr = np.asarray(s)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if arr.size and not np.all(np.abs(arr) == 1):
        raise ValueError(f"{name} entries must be -1 or +1")
    return arr.astype(np.int8, copy=False)
