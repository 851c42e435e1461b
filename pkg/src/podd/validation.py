"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

__all__ = [
    "check_image_array",
    "check_hard_labels",
    "check_soft_labels",
    "check_embedding_matrix",
]


def check_image_array(X, *, name="X") -> np.ndarray:
    """Validate a batch of channel-last images, returned as float64."""
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(
            f"{name} must have shape (n_samples, height, width, channels), "
            f"got {X.shape}"
        )
    if X.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one sample")
    X = X.astype(np.float64, copy=False)
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_hard_labels(y, n_classes: int, n_samples: int, *, name="y") -> np.ndarray:
    """Validate integer class labels in range."""
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise ValueError(f"{name} must have shape ({n_samples},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == y.astype(np.int64)):
            raise ValueError(f"{name} must hold integer class labels")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(
            f"{name} labels must lie in [0, {n_classes}), "
            f"found range [{y.min()}, {y.max()}]"
        )
    return y


def check_soft_labels(y, n_classes: int, n_samples: int, *, name="y") -> np.ndarray:
    """Validate per-sample probability vectors (rows on the simplex)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n_samples, n_classes):
        raise ValueError(
            f"{name} must have shape ({n_samples}, {n_classes}), got {y.shape}"
        )
    if (y < 0).any():
        raise ValueError(f"{name} contains negative probabilities")
    sums = y.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise ValueError(f"{name} rows must sum to 1 within 1e-6")
    return y


def check_embedding_matrix(X, *, name="X") -> np.ndarray:
    """Validate an (n, dim) embedding matrix with nonzero rows."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"{name} must be a 2-D embedding matrix, got shape {X.shape}")
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"{name} row(s) {np.nonzero(norms == 0)[0].tolist()} have zero norm")
    return X
