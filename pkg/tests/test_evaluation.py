import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import precision_recall_fscore_support, roc_auc_score

from brainstate.evaluation import (
    PipelineAConfig,
    PipelineBConfig,
    auc_trapezoid,
    bootstrap_balance,
    compute_metrics,
    loocv_folds,
    metrics_from_confusion,
    roc_curve,
    run_fold_a,
    run_pipeline_a,
    run_pipeline_b,
    split_random,
    split_sizes,
)
from brainstate.exceptions import InsufficientDataError
from brainstate.io import SynthSpec, synth_generate
from brainstate.models import ModelAConfig, ModelBConfig

# -- folds, balancing, splits ----------------------------------------------------


def test_loocv_folds():
    groups = np.repeat([f"sub-{i:02d}" for i in range(11)], 3)
    folds = loocv_folds(groups)
    assert len(folds) == 11
    for f in folds:
        assert len(f.test_indices) == 3 and len(f.train_indices) == 30
        assert set(groups[f.test_indices]) == {f.held_out_subject}
        assert f.held_out_subject not in set(groups[f.train_indices])
    assert len(loocv_folds(["a", "b"])) == 2
    with pytest.raises(InsufficientDataError):
        loocv_folds(["a", "a"])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=2, max_size=40).filter(lambda g: len(set(g)) > 1))
def test_loocv_partition(groups):
    n = len(groups)
    for f in loocv_folds(groups):
        both = np.concatenate([f.train_indices, f.test_indices])
        assert np.array_equal(np.sort(both), np.arange(n))


def test_bootstrap_balance_counts():
    y = np.array([0] * 200 + [1] * 100 + [2] * 100)
    idx = bootstrap_balance(y, seed=0)
    assert np.array_equal(idx[:400], np.arange(400))
    assert np.bincount(y[idx]).tolist() == [200, 200, 200]
    assert np.array_equal(idx, bootstrap_balance(y, seed=0))
    balanced = np.array([0, 1, 2, 2, 1, 0])
    assert np.array_equal(bootstrap_balance(balanced, seed=1), np.arange(6))


def test_bootstrap_balance_errors():
    with pytest.raises(InsufficientDataError):
        bootstrap_balance(np.array([], dtype=int), seed=0)
    with pytest.raises(InsufficientDataError):
        bootstrap_balance([0, 0, 2], seed=0, n_classes=3)


def test_split_sizes():
    assert split_sizes(3048) == (1950, 488, 610)
    assert split_sizes(10) == (6, 2, 2)
    train, val, test = split_random(3048, seed=0)
    assert (len(train), len(val), len(test)) == (1950, 488, 610)
    with pytest.raises(InsufficientDataError):
        split_random(4, seed=0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(5, 400), seed=st.integers(0, 2**31 - 1))
def test_split_partition(n, seed):
    parts = split_random(n, seed=seed)
    both = np.concatenate(parts)
    assert np.array_equal(np.sort(both), np.arange(n))
    assert tuple(len(p) for p in parts) == split_sizes(n)


def test_grouped_split_keeps_groups_together():
    groups = np.repeat(np.arange(12), 10)
    train, val, test = split_random(len(groups), seed=3, groups=groups)
    sets = [set(groups[p]) for p in (train, val, test)]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    assert np.array_equal(np.sort(np.concatenate([train, val, test])), np.arange(120))
    with pytest.raises(ValueError):
        split_random(10, seed=0, groups=[0, 1])


# -- metrics ---------------------------------------------------------------------


def test_two_class_confusion_example():
    r = metrics_from_confusion([[250, 53], [59, 248]])
    assert r.accuracy == pytest.approx(498 / 610)
    assert np.round(r.precision, 3).tolist() == [0.809, 0.824]
    assert np.round(r.recall, 3).tolist() == [0.825, 0.808]
    assert np.round(r.f1, 3).tolist() == [0.817, 0.816]


def test_averaged_three_class_confusion():
    r = metrics_from_confusion([[182.7, 9.7, 7.5], [12.6, 164.8, 22.5], [9.7, 28.4, 161.9]])
    published = np.array([[0.892, 0.914, 0.902], [0.820, 0.824, 0.819], [0.849, 0.810, 0.825]])
    got = np.column_stack([r.precision, r.recall, r.f1])
    assert np.abs(got - published).max() <= 0.015


def test_metrics_match_sklearn(rng):
    y = rng.integers(0, 3, 200)
    p = rng.integers(0, 3, 200)
    r = compute_metrics(y, p, n_classes=3)
    ps, rs, fs, _ = precision_recall_fscore_support(y, p, labels=[0, 1, 2], zero_division=0)
    np.testing.assert_allclose(r.precision, ps)
    np.testing.assert_allclose(r.recall, rs)
    np.testing.assert_allclose(r.f1, fs)
    np.testing.assert_array_equal(r.confusion.sum(axis=1), np.bincount(y, minlength=3))


def test_degenerate_flags():
    r = compute_metrics([0, 0, 1], [0, 0, 0], n_classes=3)
    assert r.precision[1] == 0.0 and r.degenerate[1] == [True, False, True]
    assert r.degenerate[2] == [True, True, True]
    assert r.degenerate[0] == [False, False, False]


def test_metrics_errors():
    with pytest.raises(ValueError):
        compute_metrics([0, 1], [0])
    with pytest.raises(ValueError):
        compute_metrics([0, 1], [0, 1], scores=[[0.5, 0.6], [0.5, 0.5]])
    with pytest.raises(ValueError):
        compute_metrics([0, 2], [0, 1], n_classes=2)
    with pytest.raises(ValueError):
        metrics_from_confusion([[1, 2, 3]])


def test_auroc_examples():
    fpr, tpr, th = roc_curve([True, False, True, False], [0.9, 0.4, 0.6, 0.1])
    assert auc_trapezoid(fpr, tpr) == 1.0
    assert th[0] == np.inf and th[-1] == -np.inf
    assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0.0, 0.0, 1.0, 1.0)
    fpr, tpr, _ = roc_curve([True, True, False, False], [0.9, 0.4, 0.6, 0.1])
    assert auc_trapezoid(fpr, tpr) == 0.75


def test_perfect_scores_give_unit_auroc():
    y = np.array([0, 1, 2, 0, 1, 2])
    scores = np.eye(3)[y] * 0.8 + 0.2 / 3
    r = compute_metrics(y, y, scores)
    assert r.auroc == [1.0, 1.0, 1.0]


def test_auroc_absent_class_is_none():
    r = compute_metrics([0, 0], [0, 0], [[0.7, 0.3], [0.6, 0.4]])
    assert r.auroc == [None, None]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 60))
def test_auroc_matches_sklearn_and_monotone_invariance(seed, n):
    rng = np.random.default_rng(seed)
    pos = rng.random(n) < 0.5
    if pos.all() or not pos.any():
        pos[0] = not pos[0]
    scores = np.round(rng.random(n), 1)  # ties on purpose
    a = auc_trapezoid(*roc_curve(pos, scores)[:2])
    assert a == pytest.approx(roc_auc_score(pos, scores), abs=1e-12)
    b = auc_trapezoid(*roc_curve(pos, np.exp(3 * scores) - 7)[:2])
    assert a == pytest.approx(b, abs=1e-12)


def test_constant_predictor_on_balanced_set():
    y = np.repeat([0, 1, 2], [50, 30, 20])
    idx = bootstrap_balance(y, seed=0)
    r = compute_metrics(y[idx], np.zeros(len(idx), dtype=int), n_classes=3)
    assert r.accuracy == pytest.approx(1 / 3)


def test_report_serialisation(tmp_path):
    r = compute_metrics([0, 1, 1], [0, 1, 0], [[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]], latencies=[1e-3, 2e-3, 3e-3])
    d = json.loads(r.to_json())
    assert d["roc"][0]["thresholds"][0] == "inf" and d["roc"][0]["thresholds"][-1] == "-inf"
    assert d["latency_mean"] == pytest.approx(2e-3)
    assert "latency_mean" not in r.to_dict(timing=False)
    path = tmp_path / "roc.csv"
    r.write_roc_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["class", "fpr", "tpr", "threshold"]
    assert len(rows) == 1 + sum(len(f) for f, _, _ in r.roc)
    assert rows[1][3] == "inf"


# -- pipelines -------------------------------------------------------------------


def tiny_a_config(**kw):
    base = dict(n_voxels=30, model=ModelAConfig.desk(input_len=30, kernel=3).to_dict(), epochs=2, batch_size=16)
    base.update(kw)
    return PipelineAConfig(**base)


def test_pipeline_a_runs_and_is_deterministic(small_subjects):
    results, summary = run_pipeline_a(small_subjects, tiny_a_config(), seed=1)
    assert [r.held_out_subject for r in results] == [s[0] for s in small_subjects]
    again, summary2 = run_pipeline_a(small_subjects, tiny_a_config(), seed=1)
    assert summary == summary2
    for a, b in zip(results, again):
        assert a.report.to_json(timing=False) == b.report.to_json(timing=False)
    # test fold balanced to equal class counts
    assert len(set(results[0].report.confusion.sum(axis=1))) == 1


def test_pipeline_a_provenance(small_subjects):
    results, _ = run_pipeline_a(small_subjects, tiny_a_config(), seed=0)
    for r in results:
        for stage in ("anova", "alignment", "balancing", "training"):
            assert r.held_out_subject not in r.provenance[stage]
        assert r.provenance["evaluation"] == [r.held_out_subject]


def test_held_out_data_does_not_reach_training(small_subjects):
    cfg = tiny_a_config()
    held = small_subjects[1][0]
    _, clf = run_fold_a(small_subjects, held, cfg, seed=0)
    noisy = list(small_subjects)
    sid, X, y = noisy[1]
    noisy[1] = (sid, np.random.default_rng(9).standard_normal(X.shape) * 50, y)
    _, clf2 = run_fold_a(noisy, held, cfg, seed=0)
    for (_, a, k), (_, b, k2) in zip(clf.network_.named_parameters(), clf2.network_.named_parameters()):
        np.testing.assert_array_equal(a.params[k], b.params[k2])


def test_pipeline_a_errors(small_subjects):
    bad = list(small_subjects)
    sid, X, y = bad[0]
    bad[0] = (sid, X[:-10], y[:-10])
    with pytest.raises(ValueError, match="same number"):
        run_pipeline_a(bad, tiny_a_config())
    with pytest.raises(InsufficientDataError):
        run_pipeline_a(small_subjects[:1], tiny_a_config())
    with pytest.raises(ValueError):
        run_pipeline_a(small_subjects, tiny_a_config(alignment="procrustes"))
    with pytest.raises(ValueError):
        PipelineAConfig.from_dict({"n_voxel": 3})


@pytest.fixture(scope="module")
def tiny_volumes():
    spec = SynthSpec(n_subjects=2, runs_per_subject=1, timepoints_per_run=40, n_voxels_latent=50, dims=(16, 16, 11))
    series, _, _ = synth_generate(spec)
    X = np.concatenate([s.volumes for s in series]).astype(np.float64)
    y = np.concatenate([s.labels for s in series])
    return X, y


def tiny_b_config(**kw):
    base = dict(model=ModelBConfig.tiny().to_dict(), epochs=1, repeats=2, batch_size=8)
    base.update(kw)
    return PipelineBConfig(**base)


def test_pipeline_b_runs_and_is_deterministic(tiny_volumes):
    X, y = tiny_volumes
    reports, preds, summary, split = run_pipeline_b(X, y, tiny_b_config(), seed=4)
    assert len(reports) == 2 and len(preds) == 2
    n = int(np.isin(y, (1, 2)).sum())
    assert (split["train"], split["val"], split["test"]) == split_sizes(n)
    assert reports[0].confusion.sum() == split["test"]
    again = run_pipeline_b(X, y, tiny_b_config(), seed=4)
    assert summary == again[2]
    assert [r.to_json(timing=False) for r in reports] == [r.to_json(timing=False) for r in again[0]]


def test_pipeline_b_needs_two_classes(tiny_volumes):
    X, y = tiny_volumes
    keep = y != 2
    with pytest.raises(InsufficientDataError):
        run_pipeline_b(X[keep], y[keep], tiny_b_config())
