"""One-way ANOVA voxel scoring and top-m voxel selection."""
import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_labels, check_matrix
from .exceptions import InsufficientDataError


def f_scores(X, y):
    """One-way ANOVA F statistic of every column of ``X`` against labels ``y``.

    Columns with zero within-class variance score ``+inf`` when their class
    means differ and ``0`` when they do not.
    """
    X = check_matrix(X, "X")
    y = check_labels(y, n_samples=X.shape[0])
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise InsufficientDataError("F scores need at least two classes")
    if counts.min() < 2:
        bad = classes[np.argmin(counts)]
        raise InsufficientDataError(f"class {bad} has fewer than 2 samples")

    n, C = X.shape[0], len(classes)
    Xc = X - X.mean(axis=0)
    ss_total = (Xc * Xc).sum(axis=0)
    ss_between = np.zeros(X.shape[1])
    ss_within = np.zeros(X.shape[1])
    for c, n_c in zip(classes, counts):
        block = Xc[y == c]
        mean_c = block.mean(axis=0)
        ss_between += n_c * mean_c**2
        ss_within += ((block - mean_c) ** 2).sum(axis=0)

    # relative to the total sum of squares, anything this small is rounding
    tiny = 1e-13 * ss_total
    constant = np.ptp(X, axis=0) == 0.0
    within_zero = (ss_within <= tiny) & ~constant
    ss_between[ss_between <= tiny] = 0.0
    F = np.zeros(X.shape[1])
    regular = ~within_zero & ~constant
    F[regular] = (ss_between[regular] / (C - 1)) / (ss_within[regular] / (n - C))
    F[within_zero] = np.inf
    return F


@dataclass
class FeatureSelection:
    m: int
    indices: np.ndarray
    f_scores: np.ndarray

    def to_json(self):
        scores = [None if not np.isfinite(f) else float(f) for f in self.f_scores]
        return json.dumps({"m": int(self.m), "indices": self.indices.tolist(), "f_scores": scores})

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        scores = np.array([np.inf if f is None else f for f in obj["f_scores"]], dtype=np.float64)
        return cls(m=int(obj["m"]), indices=np.asarray(obj["indices"], dtype=np.int64), f_scores=scores)


def select_top_m(f, m):
    """Indices (ascending) of the ``m`` highest scores; ties go to the lower index."""
    f = np.asarray(f, dtype=np.float64)
    if not 0 <= m <= f.size:
        raise ValueError(f"cannot select m={m} of {f.size} voxels")
    # lexsort: primary key descending score, secondary ascending index
    order = np.lexsort((np.arange(f.size), -f))
    return FeatureSelection(m=int(m), indices=np.sort(order[:m]), f_scores=f.copy())


class AnovaSelector(TransformerMixin, BaseEstimator):
    """Keep the ``m`` columns with the largest one-way ANOVA F score.

    Parameters
    ----------
    m : int, default=300
        Number of voxels kept.
    """

    def __init__(self, m=300):
        self.m = m

    def fit(self, X, y):
        self.selection_ = select_top_m(f_scores(X, y), self.m)
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "selection_")
        X = check_matrix(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, selector was fit on {self.n_features_in_}")
        return X[:, self.selection_.indices]

    def get_support(self, indices=False):
        check_is_fitted(self, "selection_")
        if indices:
            return self.selection_.indices
        mask = np.zeros(self.n_features_in_, dtype=bool)
        mask[self.selection_.indices] = True
        return mask
