"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ParameterError


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Coerce to [N,3,H,W] float64 in [0,1]; reject anything else."""
    if isinstance(X, (list, tuple)):
        X = np.stack([np.asarray(x, dtype=np.float64) for x in X])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise DimensionError(f"expected images shaped [N,3,H,W], got {X.shape}")
    if X.shape[1] != 3:
        raise DimensionError(f"channel axis must be 3, got {X.shape[1]}")
    if X.shape[0] == 0:
        raise ParameterError("need at least one image")
    if not np.all(np.isfinite(X)):
        raise ParameterError("images contain non-finite values")
    lo, hi = float(X.min()), float(X.max())
    if lo < 0.0 or hi > 1.0:
        raise ParameterError(f"pixel values must lie in [0,1], got [{lo:.3g}, {hi:.3g}]")
    if image_size is not None and X.shape[2:] != (image_size, image_size):
        raise DimensionError(
            f"expected {image_size}x{image_size} images, got {X.shape[2]}x{X.shape[3]}")
    return X
