"""Splitting, class balancing, metrics and the two end-to-end pipelines."""
import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import check_labels, make_rng
from .anova import AnovaSelector
from .exceptions import InsufficientDataError
from .hyperalign import Hyperaligner, IdentityAligner
from .models import ConvNetClassifier, ModelAConfig, ModelBConfig, predict

# keys of MetricsReport.to_dict() that hold wall-clock measurements
TIMING_FIELDS = ("latency_mean", "latency_sd", "elapsed")


@dataclass
class Fold:
    held_out_subject: str
    train_indices: np.ndarray
    test_indices: np.ndarray


def loocv_folds(groups):
    """One fold per distinct subject in ``groups`` (one id per sample), in sorted id order."""
    groups = np.asarray(groups)
    subjects = np.unique(groups)
    if len(subjects) < 2:
        raise InsufficientDataError("leave-one-subject-out needs at least two subjects")
    idx = np.arange(len(groups))
    return [Fold(str(s), idx[groups != s], idx[groups == s]) for s in subjects]


def bootstrap_balance(labels, seed=None, n_classes=None):
    """Indices that upsample every class to the size of the largest one.

    All original indices come first, in order, followed by the extra draws
    (with replacement) for the smaller classes. A balanced input therefore
    returns ``arange(len(labels))``. With ``n_classes`` every label in
    ``range(n_classes)`` must occur.
    """
    y = check_labels(labels, n_classes=n_classes)
    if y.size == 0:
        raise InsufficientDataError("cannot balance an empty label set")
    classes, counts = np.unique(y, return_counts=True)
    if n_classes is not None and len(classes) < n_classes:
        missing = sorted(set(range(n_classes)) - set(classes.tolist()))
        raise InsufficientDataError(f"classes {missing} have no samples")
    rng = make_rng(seed)
    target = counts.max()
    extra = []
    for c, n in zip(classes, counts):
        if n < target:
            extra.append(rng.choice(np.flatnonzero(y == c), size=target - n, replace=True))
    return np.concatenate([np.arange(len(y))] + extra)


def split_sizes(n):
    test = int(round(0.2 * n))
    val = int(round(0.2 * (n - test)))
    return n - test - val, val, test


def split_random(n_samples, seed=None, groups=None):
    """Shuffle and cut into ``(train, val, test)`` index arrays.

    ``test = round(0.2 n)`` and ``val = round(0.2 (n - test))``. With
    ``groups`` whole groups (for instance runs) are assigned to one part,
    so the sizes are only approximately met.
    """
    if n_samples < 5:
        raise InsufficientDataError("random split needs at least 5 samples")
    rng = make_rng(seed)
    n_train, n_val, n_test = split_sizes(n_samples)
    if groups is None:
        order = rng.permutation(n_samples)
        return (
            np.sort(order[n_test + n_val:]),
            np.sort(order[n_test: n_test + n_val]),
            np.sort(order[:n_test]),
        )
    groups = np.asarray(groups)
    if len(groups) != n_samples:
        raise ValueError("need one group id per sample")
    uniq = np.unique(groups)
    uniq = uniq[rng.permutation(len(uniq))]
    parts = ([], [], [])
    filled = [0, 0]
    for g in uniq:
        members = np.flatnonzero(groups == g)
        if filled[0] < n_test:
            slot = 2
            filled[0] += len(members)
        elif filled[1] < n_val:
            slot = 1
            filled[1] += len(members)
        else:
            slot = 0
        parts[slot].append(members)
    return tuple(np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts)


def roc_curve(positive, scores):
    """One-vs-rest ROC with a threshold at every distinct score plus +-inf.

    A sample is called positive when ``score >= threshold``. Returns
    ``(fpr, tpr, thresholds)`` ordered by decreasing threshold.
    """
    positive = np.asarray(positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    thresholds = np.concatenate([[np.inf], np.unique(scores)[::-1], [-np.inf]])
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    pos_cum = np.concatenate([[0], np.cumsum(positive[order])])
    neg_cum = np.concatenate([[0], np.cumsum(~positive[order])])
    # samples with score >= t are the first k of the descending order
    k = np.searchsorted(-s_sorted, -thresholds, side="right")
    n_pos, n_neg = pos_cum[-1], neg_cum[-1]
    tpr = pos_cum[k] / n_pos if n_pos else np.zeros(len(k))
    fpr = neg_cum[k] / n_neg if n_neg else np.zeros(len(k))
    return fpr, tpr, thresholds


def auc_trapezoid(fpr, tpr):
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass
class MetricsReport:
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    degenerate: list
    accuracy: float
    roc: list = field(default_factory=list)  # per class: (fpr, tpr, thresholds)
    auroc: list = field(default_factory=list)
    latency_mean: float = None
    latency_sd: float = None

    @property
    def n_samples(self):
        return float(self.confusion.sum())

    def to_dict(self, timing=True):
        d = {
            "confusion": self.confusion.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "degenerate": [list(flags) for flags in self.degenerate],
            "accuracy": self.accuracy,
            "auroc": [None if a is None else float(a) for a in self.auroc],
            "roc": [
                {"fpr": f.tolist(), "tpr": t.tolist(), "thresholds": [_jsonable(x) for x in th]}
                for f, t, th in self.roc
            ],
        }
        if timing:
            d["latency_mean"] = self.latency_mean
            d["latency_sd"] = self.latency_sd
        return d

    def to_json(self, timing=True):
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True)

    def write_roc_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "fpr", "tpr", "threshold"])
            for c, (fpr, tpr, th) in enumerate(self.roc):
                for row in zip(fpr, tpr, th):
                    w.writerow([c, repr(float(row[0])), repr(float(row[1])), repr(float(row[2]))])


def _jsonable(x):
    x = float(x)
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _safe_ratio(num, den):
    out = np.zeros_like(num, dtype=np.float64)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out, ~ok


def metrics_from_confusion(confusion):
    """Precision, recall, F1 and accuracy from a (possibly real-valued) confusion matrix.

    Rows are true classes and columns predicted classes. Zero denominators
    give 0 and set the matching flag in ``degenerate`` (one
    ``[precision, recall, f1]`` triple per class).
    """
    C = np.asarray(confusion, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {C.shape}")
    if np.any(C < 0):
        raise ValueError("confusion entries must be non-negative")
    tp = np.diag(C)
    precision, p_bad = _safe_ratio(tp, C.sum(axis=0))
    recall, r_bad = _safe_ratio(tp, C.sum(axis=1))
    f1, f_bad = _safe_ratio(2 * precision * recall, precision + recall)
    total = C.sum()
    accuracy = float(tp.sum() / total) if total > 0 else 0.0
    degenerate = [[bool(a), bool(b), bool(c)] for a, b, c in zip(p_bad, r_bad, f_bad)]
    return MetricsReport(C, precision, recall, f1, degenerate, accuracy)


def compute_metrics(y_true, y_pred, scores=None, n_classes=None, latencies=None):
    """Full metric suite for integer labels and optional per-class scores.

    Parameters
    ----------
    y_true, y_pred : array-like of int
    scores : array-like, shape (n_samples, n_classes), optional
        Class probabilities; rows must sum to 1 within 1e-6. Enables the
        one-vs-rest ROC curves and AUROC (``None`` for a class that is absent
        or present in every sample).
    n_classes : int, optional
        Defaults to the score width, else to ``max(label) + 1``.
    latencies : array-like of float, optional
        Per-sample prediction times in seconds.
    """
    y_true = check_labels(y_true)
    y_pred = check_labels(y_pred)
    if len(y_true) != len(y_pred):
        raise ValueError(f"{len(y_true)} true labels but {len(y_pred)} predictions")
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float64)
        if scores.ndim != 2 or len(scores) != len(y_true):
            raise ValueError("scores must have one row per sample")
        if len(scores) and np.max(np.abs(scores.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("score rows must sum to 1")
        n_classes = n_classes or scores.shape[1]
    if n_classes is None:
        n_classes = int(max(y_true.max(initial=-1), y_pred.max(initial=-1)) + 1)
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise ValueError(f"{name} has labels outside [0, {n_classes})")

    C = np.zeros((n_classes, n_classes))
    np.add.at(C, (y_true, y_pred), 1.0)
    report = metrics_from_confusion(C)
    if scores is not None:
        for c in range(n_classes):
            pos = y_true == c
            fpr, tpr, th = roc_curve(pos, scores[:, c])
            report.roc.append((fpr, tpr, th))
            report.auroc.append(auc_trapezoid(fpr, tpr) if 0 < pos.sum() < len(pos) else None)
    if latencies is not None:
        lat = np.asarray(latencies, dtype=np.float64)
        report.latency_mean = float(lat.mean()) if lat.size else 0.0
        report.latency_sd = float(lat.std()) if lat.size else 0.0
    return report


def evaluate_network(net, X, y, n_classes):
    """Predict every sample on its own, timing each call.

    Returns ``(report, predictions)`` where ``predictions`` holds the true
    labels, predicted labels and class probabilities as lists.
    """
    probs, preds, lat = [], [], []
    for sample in X:
        c, p, dt = predict(net, sample)
        preds.append(c)
        probs.append(p)
        lat.append(dt)
    probs = np.array(probs).reshape(len(X), n_classes)
    preds = np.array(preds, dtype=np.int64)
    report = compute_metrics(y, preds, probs, n_classes, lat)
    predictions = {"y_true": np.asarray(y).tolist(), "y_pred": preds.tolist(), "scores": probs.tolist()}
    return report, predictions


def summarize(reports):
    acc = np.array([r.accuracy for r in reports])
    return {"mean_accuracy": float(acc.mean()), "sd_accuracy": float(acc.std()), "accuracies": acc.tolist()}


@dataclass
class PipelineAConfig:
    n_voxels: int = 300
    n_iter: int = 3
    alignment: str = "hyperalign"  # or "identity"
    svd_method: str = "lapack"
    model: dict = field(default_factory=lambda: ModelAConfig.desk().to_dict())
    epochs: int = 500
    batch_size: int = 32
    balance_test: bool = True

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline A options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FoldResult:
    held_out_subject: str
    report: MetricsReport
    # subject ids that fed each stage
    provenance: dict
    history: list
    predictions: dict = None

    def to_dict(self, timing=True):
        return {
            "held_out_subject": self.held_out_subject,
            "metrics": self.report.to_dict(timing),
            "provenance": self.provenance,
            "final_train_loss": self.history[-1]["loss"] if self.history else None,
        }


def run_fold_a(subjects, held_out, config, seed=0):
    """Train on every subject except ``held_out`` and score that subject.

    ``subjects`` is a list of ``(subject_id, X, y)`` with ``X`` of shape
    ``(timepoints, voxels)``. Everything fitted here (voxel selection,
    common space, balancing draws, network) sees training subjects only.
    """
    ids = [s[0] for s in subjects]
    fold = ids.index(held_out)
    rng = np.random.default_rng(np.random.SeedSequence([seed, fold]))
    train = [s for s in subjects if s[0] != held_out]
    _, X_test, y_test = subjects[fold]
    train_ids = [s[0] for s in train]

    selector = AnovaSelector(m=config.n_voxels)
    selector.fit(np.vstack([s[1] for s in train]), np.concatenate([s[2] for s in train]))
    train_sel = [selector.transform(s[1]) for s in train]
    if config.alignment == "hyperalign":
        aligner = Hyperaligner(n_iter=config.n_iter, svd_method=config.svd_method)
    elif config.alignment == "identity":
        aligner = IdentityAligner()
    else:
        raise ValueError(f"unknown alignment {config.alignment!r}")
    aligned = aligner.fit_transform(train_sel, subject_ids=train_ids)
    test_aligned = aligner.transform(selector.transform(X_test))

    X_parts, y_parts = [], []
    for A, (_, _, y) in zip(aligned, train):
        idx = bootstrap_balance(y, rng)
        X_parts.append(A[idx])
        y_parts.append(y[idx])
    X_train = np.vstack(X_parts)
    y_train = np.concatenate(y_parts)
    model_cfg = ModelAConfig.from_dict(config.model)
    clf = ConvNetClassifier(
        "a", model_cfg.to_dict(), epochs=config.epochs, batch_size=config.batch_size,
        seed=int(rng.integers(2**31 - 1)),
    )
    clf.fit(X_train, y_train)
    if config.balance_test:
        idx = bootstrap_balance(y_test, rng)
        test_aligned, y_test = test_aligned[idx], y_test[idx]
    report, predictions = evaluate_network(clf.network_, test_aligned[:, None, :], y_test, model_cfg.n_classes)
    provenance = {
        "anova": train_ids,
        "alignment": train_ids,
        "balancing": train_ids,
        "training": train_ids,
        "evaluation": [held_out],
    }
    return FoldResult(held_out, report, provenance, clf.history_, predictions), clf


def run_pipeline_a(subjects, config=None, seed=0, log=None, checkpoint_dir=None):
    """Leave-one-subject-out evaluation of voxel selection, alignment and Model A.

    ``subjects`` is a list of ``(subject_id, X, y)``. With ``checkpoint_dir``
    each fold's network is saved as ``fold_<subject>.nnet``.

    Returns ``(fold_results, summary)``.
    """
    config = config or PipelineAConfig()
    shapes = {s[1].shape for s in subjects}
    if len(shapes) != 1:
        raise ValueError(f"all subjects need the same number of timepoints and voxels, got {sorted(shapes)}")
    loocv_folds([s[0] for s in subjects])  # validates the subject count
    results = []
    for subject_id, _, _ in subjects:
        result, clf = run_fold_a(subjects, subject_id, config, seed)
        results.append(result)
        if checkpoint_dir is not None:
            clf.save(os.path.join(checkpoint_dir, f"fold_{subject_id}.nnet"))
        if log is not None:
            log(f"fold {subject_id}: accuracy {result.report.accuracy:.4f}")
    return results, summarize([r.report for r in results])


@dataclass
class PipelineBConfig:
    model: dict = field(default_factory=lambda: ModelBConfig.tiny().to_dict())
    epochs: int = 5
    batch_size: int = 32
    repeats: int = 10
    grouped_split: bool = False

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline B options: {sorted(unknown)}")
        return cls(**d)


# condition codes kept by the two-class task, mapped to 0 and 1
TWO_CLASS_CODES = (1, 2)


def run_pipeline_b(volumes, labels, config=None, seed=0, groups=None, log=None, checkpoint_dir=None):
    """Random split plus repeated, reseeded Model B training on two classes.

    ``volumes`` has shape ``(n, nx, ny, nz)``; ``labels`` uses the condition
    codes, of which only neutral (1) and negative (2) are kept. ``groups``
    (for instance run ids) is used only when ``config.grouped_split`` is set.

    Each repeat trains on a bootstrap resample of the same training split.
    Returns ``(reports, predictions, summary, split)``.
    """
    config = config or PipelineBConfig()
    labels = check_labels(labels, n_samples=len(volumes))
    keep = np.isin(labels, TWO_CLASS_CODES)
    X = np.asarray(volumes, dtype=np.float64)[keep]
    y = (labels[keep] == TWO_CLASS_CODES[1]).astype(np.int64)
    if len(np.unique(y)) < 2:
        raise InsufficientDataError("two-class training needs both classes present")
    g = np.asarray(groups)[keep] if (groups is not None and config.grouped_split) else None
    split_seq, *repeat_seqs = np.random.SeedSequence(seed).spawn(1 + config.repeats)
    train, val, test = split_random(len(y), np.random.default_rng(split_seq), groups=g)
    model_cfg = ModelBConfig.from_dict(config.model)
    reports, predictions = [], []
    for r, seq in enumerate(repeat_seqs):
        rng = np.random.default_rng(seq)
        idx = train[rng.integers(0, len(train), size=len(train))]
        clf = ConvNetClassifier(
            "b", model_cfg.to_dict(), epochs=config.epochs, batch_size=config.batch_size,
            seed=int(rng.integers(2**31 - 1)),
        )
        clf.fit(X[idx], y[idx])
        report, preds = evaluate_network(clf.network_, X[test][:, None], y[test], model_cfg.n_classes)
        reports.append(report)
        predictions.append(preds)
        if checkpoint_dir is not None:
            clf.save(os.path.join(checkpoint_dir, f"repeat_{r:02d}.nnet"))
        if log is not None:
            log(f"repeat {r}: accuracy {report.accuracy:.4f}")
    split = {"train": len(train), "val": len(val), "test": len(test)}
    return reports, predictions, summarize(reports), split
