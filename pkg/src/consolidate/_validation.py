"""Input checks shared by the estimator and the experiment drivers."""

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, input_shape):
    """Accept (n, 28, 28), (n, 784) or (n, 1, 28, 28) and validate the size."""
    X = check_array(X, allow_nd=True, dtype=None, ensure_all_finite=True, copy=False)
    per_sample = int(np.prod(X.shape[1:]))
    if per_sample != int(np.prod(input_shape)):
        raise ValueError(
            f"each sample has {per_sample} values, the network expects {input_shape}"
        )
    return X


def check_labels(y, n_samples, n_classes):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"y must be a 1-d array of length {n_samples}, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("y must contain integer class indices")
        y = y.astype(np.int64)
    if len(y) and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"class indices must lie in [0, {n_classes})")
    return y


def check_fraction(p):
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {p}")
    return p
