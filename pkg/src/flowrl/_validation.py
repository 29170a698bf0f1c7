"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array


def check_obs(X, n_features: int | None = None) -> np.ndarray:
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} observation features, got {X.shape[1]}")
    return X


def check_chunks(y, n_samples: int, chunk_size: int, action_dim: int) -> np.ndarray:
    """Accept ``(n, H, d)`` or ``(n, H * d)`` chunks; return flattened ``(n, H * d)``."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 3:
        if y.shape[1:] != (chunk_size, action_dim):
            raise ValueError(f"expected chunks of shape ({chunk_size}, {action_dim}), got {y.shape[1:]}")
        y = y.reshape(len(y), -1)
    elif y.ndim != 2 or y.shape[1] != chunk_size * action_dim:
        raise ValueError(f"expected flattened chunks of width {chunk_size * action_dim}, got {y.shape}")
    if len(y) != n_samples:
        raise ValueError(f"got {n_samples} observations but {len(y)} chunks")
    if not np.all(np.isfinite(y)):
        raise ValueError("chunks contain NaN or inf")
    return y


def check_is_fitted(est, attr: str = "velocity_net_") -> None:
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not initialized; call fit or initialize first")
