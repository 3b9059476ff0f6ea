"""Input checks shared by the estimators."""
import numpy as np


def check_matrix(X, name="X", allow_empty=False):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if not allow_empty and X.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_labels(y, n_samples=None, n_classes=None):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if n_samples is not None and len(y) != n_samples:
        raise ValueError(f"{len(y)} labels for {n_samples} samples")
    if n_classes is not None and y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def check_same_shape(mats, what="matrices"):
    shapes = {np.shape(m) for m in mats}
    if len(shapes) != 1:
        raise ValueError(f"{what} must share one shape, got {sorted(shapes)}")
    return shapes.pop()


def make_rng(seed):
    """``numpy.random.Generator`` from an int, a SeedSequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
