"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numbers

import numpy as np


def check_points(X, n_features=None, name="X"):
    """Return ``X`` as a finite 2-D float array.

    Unlike :func:`sklearn.utils.check_array` this accepts zero rows, which is
    how an empty (prior-only) GP dataset is expressed.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        # a lone 1-D vector is one point when its length matches n_features
        if n_features is not None and X.size == n_features:
            X = X.reshape(1, -1)
        else:
            X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if n_features is not None and X.shape[0] and X.shape[1] != n_features:
        raise ValueError(f"{name} has {X.shape[1]} columns, expected {n_features}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or inf")
    return X


def check_targets(y, n_samples, name="y"):
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != n_samples:
        raise ValueError(f"{name} has {y.shape[0]} entries, expected {n_samples}")
    if not np.all(np.isfinite(y)):
        raise ValueError(f"{name} contains NaN or inf")
    return y


def check_noise(noise_variance, n_samples):
    noise = np.broadcast_to(np.asarray(noise_variance, dtype=float), (n_samples,)).copy()
    if np.any(noise <= 0) or not np.all(np.isfinite(noise)):
        raise ValueError("noise_variance must be strictly positive and finite")
    return noise


def check_positive(value, name):
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive real, got {value!r}")
    return float(value)


def check_random_state(seed):
    """Turn ``seed`` into a :class:`numpy.random.Generator`."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
