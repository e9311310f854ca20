"""Input checks shared by the estimators and metrics."""
from __future__ import annotations

import numpy as np


def check_images(X, shape: tuple[int, int, int] | None = None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a float32 (n, H, W, C) array with values in [0, 1].

    A 3-d array is read as single-channel (n, H, W).
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape (n, H, W, C), got {X.shape}")
    if X.shape[0] < 1:
        raise ValueError(f"{name} is empty")
    if shape is not None and tuple(X.shape[1:]) != tuple(shape):
        raise ValueError(f"{name} has image shape {X.shape[1:]}, expected {tuple(shape)}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    if X.min() < 0 or X.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return X


def check_latents(Z, z_dim: int | None = None, name: str = "Z") -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.ndim != 2:
        raise ValueError(f"{name} must have shape (n, z_dim), got {Z.shape}")
    if z_dim is not None and Z.shape[1] != z_dim:
        raise ValueError(f"{name} has {Z.shape[1]} dimensions, expected {z_dim}")
    if not np.isfinite(Z).all():
        raise ValueError(f"{name} contains non-finite values")
    return Z


def check_factors(factors, cardinalities=None, name: str = "factors") -> np.ndarray:
    factors = np.asarray(factors)
    if factors.ndim != 2:
        raise ValueError(f"{name} must have shape (n, K), got {factors.shape}")
    if not np.issubdtype(factors.dtype, np.integer):
        if not np.all(factors == np.round(factors)):
            raise ValueError(f"{name} must hold integer indices")
        factors = factors.astype(np.int64)
    if np.any(factors < 0):
        raise ValueError(f"{name} must be non-negative")
    if cardinalities is not None and np.any(factors >= np.asarray(cardinalities)):
        raise ValueError(f"{name} index out of range")
    return factors


def as_rng(random_state) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)
