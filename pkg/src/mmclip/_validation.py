"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_X_y

from .data import CleanSet


def check_samples(X, input_shape: tuple) -> np.ndarray:
    """Validate a batch of inputs in [0, 1] and reshape it to ``(n,) + input_shape``.

    Accepts either flattened rows or arrays already carrying the input geometry.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 + len(input_shape) and X.shape[1:] == tuple(input_shape):
        flat = X.reshape(len(X), -1)
    else:
        flat = X
    flat = check_array(flat, dtype=np.float64, ensure_2d=True)
    d = int(np.prod(input_shape))
    if flat.shape[1] != d:
        raise ValueError(f"expected {d} features per sample, got {flat.shape[1]}")
    if flat.min() < 0.0 or flat.max() > 1.0:
        raise ValueError("inputs must lie in [0, 1]")
    return flat.reshape((len(flat),) + tuple(input_shape))


def check_labels(X, y, input_shape: tuple, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    flat = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    flat, y = check_X_y(flat, y, dtype=np.float64, y_numeric=True)
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return check_samples(flat, input_shape), y


def check_clean_set(X, y, input_shape: tuple, num_classes: int) -> CleanSet:
    X, y = check_labels(X, y, input_shape, num_classes)
    return CleanSet(X, y, num_classes)
