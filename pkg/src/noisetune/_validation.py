"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionError


def check_images(X, config=None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a float64 ``n x C x H x W`` array with finite values in ``[0, 1]``.

    A single ``C x H x W`` image is promoted to a batch of one. When an
    encoder ``config`` is given the trailing dimensions must match it.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise DimensionError(f"{name} must be a batch of C x H x W images, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or Inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    if config is not None:
        expected = (config.channels, config.image_size, config.image_size)
        if X.shape[1:] != expected:
            raise DimensionError(f"{name} images have shape {X.shape[1:]}, encoder expects {expected}")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    return y
