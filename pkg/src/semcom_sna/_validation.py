"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import hashlib
from typing import Iterable, Sequence

import numpy as np


class ContractError(ValueError):
    """An input violates a documented shape or value contract."""


def check_images(X, *, shape: Sequence[int] | None = None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a float32 array of shape (n, C, H, W) with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ContractError(f"{name} must have shape (n, C, H, W), got {X.shape}")
    if shape is not None and tuple(X.shape[1:]) != tuple(shape):
        raise ContractError(f"{name} samples must have shape {tuple(shape)}, got {X.shape[1:]}")
    if not np.all(np.isfinite(X)):
        raise ContractError(f"{name} contains non-finite values")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ContractError(f"{name} pixel values must lie in [0, 1]")
    return X


def check_labels(y, n_samples: int, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ContractError(f"y must be 1-D with {n_samples} entries, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ContractError("class labels must be integers")
        y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise ContractError("class labels must be non-negative")
    if n_classes is not None and y.size and y.max() >= n_classes:
        raise ContractError(f"label {int(y.max())} out of range for {n_classes} classes")
    return y.astype(np.int64)


def check_vector(v, name: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ContractError(f"{name} contains non-finite values")
    return v


def content_digest(*arrays: np.ndarray, extra: Iterable[str] = ()) -> str:
    """SHA-256 over the raw bytes, dtypes and shapes of ``arrays``."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    for s in extra:
        h.update(s.encode("utf-8"))
    return h.hexdigest()
