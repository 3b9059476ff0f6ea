"""Orthogonal Procrustes alignment of subjects into a shared voxel space.

Subject matrices are ``timepoints x voxels``; rotations act on the voxel axis,
so an aligned subject is ``X @ R`` with ``R`` an ``m x m`` orthogonal matrix.
Each subject is first centered per voxel (optional) and scaled to unit
Frobenius norm. Rotations keep centered columns centered, so the Pearson
correlation between aligned subjects equals their inner product, which is
the quantity the refinement passes increase. Fitting runs three stages:

1. a running-mean reference is grown subject by subject (order dependent),
2. ``n_iter`` refinement passes realign every subject to the mean of the
   others and then reset the reference to the group mean,
3. every subject is solved once more against the frozen reference. These are
   the rotations stored, and exactly what :meth:`Hyperaligner.transform`
   computes for a new subject.
"""
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_same_shape
from .anova import FeatureSelection
from .exceptions import FormatError
from .linalg import frobenius_normalize, svd

CHECKPOINT_MAGIC = b"HALN"
CHECKPOINT_VERSION = 2


def prepare_subject(X, center=True):
    """Optionally remove each voxel's time mean, then scale to unit Frobenius norm."""
    X = check_matrix(X, "subject")
    if center:
        X = X - X.mean(axis=0)
    return frobenius_normalize(X)


def procrustes_rotation(X, T, svd_method="lapack", return_info=False):
    """Orthogonal ``R`` minimising ``||X @ R - T||_F``.

    With ``X.T @ T = U S V^T`` the minimiser is ``R = U V^T``. When the
    cross-product is singular the optimum is not unique; any valid optimum
    is returned and ``info["unique"]`` is False.
    """
    X = check_matrix(X, "X")
    T = check_matrix(T, "T")
    if X.shape != T.shape:
        raise ValueError(f"shape mismatch: X {X.shape} vs T {T.shape}")
    U, S, V = svd(X.T @ T, method=svd_method)
    R = U @ V.T
    if not return_info:
        return R
    unique = bool(S.size and S[-1] > 1e-12 * max(S[0], np.finfo(float).tiny))
    return R, {"unique": unique, "singular_values": S}


def mean_pairwise_correlation(mats):
    """Average Pearson correlation between the flattened matrices of all pairs."""
    flat = np.array([np.ravel(m) for m in mats], dtype=np.float64)
    if len(flat) < 2:
        raise ValueError("need at least two matrices")
    C = np.corrcoef(flat)
    iu = np.triu_indices(len(flat), k=1)
    return float(np.mean(C[iu]))


def level1_align(subjects, ref_index=0, svd_method="lapack"):
    """Grow a reference by aligning subjects in order to its running mean.

    The reference starts as ``subjects[ref_index]``. After aligning the i-th
    further subject the reference becomes ``ref + (aligned - ref) / (i + 1)``,
    i.e. the unweighted mean of everything aligned so far.

    Returns ``(rotations, aligned, T)``.
    """
    subjects = [check_matrix(S, "subject") for S in subjects]
    if len(subjects) < 2:
        raise ValueError("alignment needs at least two subjects")
    check_same_shape(subjects, "subject matrices")
    if not 0 <= ref_index < len(subjects):
        raise IndexError(f"ref_index {ref_index} out of range")
    m = subjects[0].shape[1]

    ref = subjects[ref_index].copy()
    rotations = [None] * len(subjects)
    aligned = [None] * len(subjects)
    rotations[ref_index] = np.eye(m)
    aligned[ref_index] = subjects[ref_index].copy()
    count = 1
    for i, S in enumerate(subjects):
        if i == ref_index:
            continue
        R = procrustes_rotation(S, ref, svd_method)
        rotations[i] = R
        aligned[i] = S @ R
        count += 1
        ref = ref + (aligned[i] - ref) / count
    return rotations, aligned, ref


def level2_refine(aligned, T, n_iter=3, svd_method="lapack", history=None):
    """Leave-one-out refinement passes.

    In each pass every subject in turn is realigned to the mean of the other
    subjects. The reference is updated in place after each subject, so the
    leave-one-out mean is always exact and every step can only increase the
    summed pairwise inner product ``sum_{i<j} <A_i, A_j>``. After the pass
    the reference is reset to the mean of all aligned subjects, which removes
    accumulated rounding.

    Returns ``(rotations, aligned, T)`` where each rotation is the product
    of this stage's updates, to be right-multiplied onto the Level-1
    rotation. If ``history`` is a list, the mean pairwise correlation after
    every pass is appended to it.
    """
    A = [check_matrix(S, "subject").copy() for S in aligned]
    p = len(A)
    if p < 2:
        raise ValueError("refinement needs at least two subjects")
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    check_same_shape(A + [T], "aligned subjects and reference")
    m = A[0].shape[1]
    T = np.asarray(T, dtype=np.float64).copy()
    rotations = [np.eye(m) for _ in range(p)]
    for _ in range(n_iter):
        for j in range(p):
            others = (p * T - A[j]) / (p - 1)
            R = procrustes_rotation(A[j], others, svd_method)
            new = A[j] @ R
            T = T + (new - A[j]) / p
            A[j] = new
            rotations[j] = rotations[j] @ R
        T = sum(A) / p
        if history is not None:
            history.append(mean_pairwise_correlation(A))
    return rotations, A, T


@dataclass
class CommonSpace:
    """A fitted alignment: reference ``T`` plus one rotation per training subject."""

    T: np.ndarray
    rotations: list
    subject_ids: list = field(default_factory=list)
    selection: FeatureSelection = None
    n_iter: int = 3
    ref_index: int = 0
    weight_schedule: str = "running-mean"
    center: bool = True

    def transform(self, X, svd_method="lapack"):
        X = prepare_subject(X, self.center)
        if X.shape != self.T.shape:
            raise ValueError(f"subject shape {X.shape} does not match reference {self.T.shape}")
        return X @ procrustes_rotation(X, self.T, svd_method)


def save_common_space(path, space):
    n, m = space.T.shape
    p = len(space.rotations)
    sel = space.selection.to_json().encode("utf-8") if space.selection is not None else b""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4s5I", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, n, m, p, int(space.center)))
        fh.write(np.ascontiguousarray(space.T, dtype="<f8").tobytes())
        for R in space.rotations:
            fh.write(np.ascontiguousarray(R, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(sel)))
        fh.write(sel)


def load_common_space(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.Struct("<4s5I")
    if len(raw) < head.size:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    magic, version, n, m, p, center = head.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    off = head.size
    need = off + 8 * (n * m + p * m * m) + 4
    if len(raw) < need:
        raise FormatError(f"{path}: truncated matrices", offset=len(raw))
    T = np.frombuffer(raw, dtype="<f8", count=n * m, offset=off).reshape(n, m).copy()
    off += 8 * n * m
    rotations = []
    for _ in range(p):
        rotations.append(np.frombuffer(raw, dtype="<f8", count=m * m, offset=off).reshape(m, m).copy())
        off += 8 * m * m
    (length,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) != off + length:
        raise FormatError(f"{path}: selection block length mismatch", offset=off)
    selection = FeatureSelection.from_json(raw[off:].decode("utf-8")) if length else None
    return CommonSpace(T=T, rotations=rotations, selection=selection, center=bool(center))


class Hyperaligner(TransformerMixin, BaseEstimator):
    """Fit a common space on training subjects and project any subject into it.

    Parameters
    ----------
    n_iter : int, default=3
        Number of leave-one-out refinement passes.
    ref_index : int, default=0
        Subject that seeds the running-mean reference.
    svd_method : {"lapack", "jacobi"}, default="lapack"
    center : bool, default=True
        Remove each voxel's time mean before normalising.
    """

    def __init__(self, n_iter=3, ref_index=0, svd_method="lapack", center=True):
        self.n_iter = n_iter
        self.ref_index = ref_index
        self.svd_method = svd_method
        self.center = center

    def fit(self, X, y=None, subject_ids=None):
        """``X`` is a sequence of per-subject ``timepoints x voxels`` matrices."""
        subjects = [prepare_subject(S, self.center) for S in X]
        rot1, aligned, T = level1_align(subjects, self.ref_index, self.svd_method)
        self.level1_rotations_ = rot1
        self.correlation_history_ = [mean_pairwise_correlation(aligned)]
        _, _, T = level2_refine(
            aligned, T, self.n_iter, self.svd_method, history=self.correlation_history_
        )
        rotations = [procrustes_rotation(S, T, self.svd_method) for S in subjects]
        self.common_space_ = CommonSpace(
            T=T,
            rotations=rotations,
            subject_ids=list(subject_ids) if subject_ids is not None else [],
            n_iter=self.n_iter,
            ref_index=self.ref_index,
            center=self.center,
        )
        self.aligned_ = [S @ R for S, R in zip(subjects, rotations)]
        return self

    def transform(self, X):
        """Align one subject matrix (or a list of them) to the fitted reference."""
        check_is_fitted(self, "common_space_")
        if isinstance(X, (list, tuple)):
            return [self.common_space_.transform(S, self.svd_method) for S in X]
        return self.common_space_.transform(X, self.svd_method)

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y, **fit_params).aligned_


class IdentityAligner(TransformerMixin, BaseEstimator):
    """Ablation stand-in for :class:`Hyperaligner`: same preprocessing, never rotate."""

    def __init__(self, center=True):
        self.center = center

    def fit(self, X, y=None, subject_ids=None):
        self.aligned_ = [prepare_subject(S, self.center) for S in X]
        return self

    def transform(self, X):
        if isinstance(X, (list, tuple)):
            return [prepare_subject(S, self.center) for S in X]
        return prepare_subject(X, self.center)

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y, **fit_params).aligned_
