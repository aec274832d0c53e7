"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np

from .exceptions import InvalidArgumentError, InvalidShapeError


def check_images(X, channels: int = 3, min_size: int = 1) -> np.ndarray:
    """Return ``X`` as a float64 N x C x H x W array of [0,1] pixels."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != channels:
        raise InvalidShapeError(f"expected images shaped N x {channels} x H x W, got {X.shape}")
    if len(X) == 0:
        raise InvalidShapeError("no images given")
    if min(X.shape[2:]) < min_size:
        raise InvalidShapeError(f"images {X.shape[2:]} smaller than {min_size}px")
    if not np.isfinite(X).all():
        raise InvalidArgumentError("images contain NaN or infinite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise InvalidArgumentError("pixel values must lie in [0, 1]")
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise InvalidShapeError(f"expected {n_samples} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise InvalidArgumentError("class labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0:
        raise InvalidArgumentError("class labels must be non-negative")
    return y.astype(np.int64)


def check_positive(name: str, value, allow_zero: bool = False) -> None:
    if value is None:
        return
    if (value < 0) if allow_zero else (value <= 0):
        bound = "non-negative" if allow_zero else "positive"
        raise InvalidArgumentError(f"{name} must be {bound}, got {value!r}")
