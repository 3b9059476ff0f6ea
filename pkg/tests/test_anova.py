import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.feature_selection import f_classif

from brainstate.anova import AnovaSelector, FeatureSelection, f_scores, select_top_m
from brainstate.exceptions import InsufficientDataError


def brute_force_f(column, labels):
    """Two-pass textbook one-way ANOVA on plain Python floats."""
    groups = {}
    for v, c in zip(column, labels):
        groups.setdefault(int(c), []).append(float(v))
    n = len(column)
    k = len(groups)
    grand = math.fsum(column) / n
    ssb = math.fsum(len(g) * (math.fsum(g) / len(g) - grand) ** 2 for g in groups.values())
    ssw = math.fsum((v - math.fsum(g) / len(g)) ** 2 for g in groups.values() for v in g)
    return (ssb / (k - 1)) / (ssw / (n - k))


def test_hand_case():
    assert f_scores(np.array([[1.0], [2.0], [3.0], [4.0]]), [0, 0, 1, 1])[0] == 8.0


def test_zero_within_variance_is_inf():
    assert f_scores(np.array([[5.0], [5.0], [9.0], [9.0]]), [0, 0, 1, 1])[0] == np.inf


def test_equal_means_is_zero():
    X = np.array([[1.0], [3.0], [3.0], [1.0]])
    assert f_scores(X, [0, 0, 1, 1])[0] == 0.0


def test_constant_column_is_zero():
    X = np.full((6, 2), 7.0)
    X[:, 1] = [1, 2, 1, 2, 5, 6]
    F = f_scores(X, [0, 0, 1, 1, 2, 2])
    assert F[0] == 0.0 and np.isfinite(F[1])


def test_too_few_samples():
    with pytest.raises(InsufficientDataError):
        f_scores(np.ones((3, 1)), [0, 0, 1])
    with pytest.raises(InsufficientDataError):
        f_scores(np.ones((3, 1)), [0, 0, 0])


@pytest.mark.parametrize("seed", range(100))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n_classes = rng.integers(2, 5)
    y = np.concatenate([np.arange(n_classes)] * 2 + [rng.integers(0, n_classes, 20 - 2 * n_classes)])
    X = rng.standard_normal((20, 6)) * rng.uniform(0.1, 10, 6) + rng.uniform(-5, 5, 6)
    X[:, 0] += y * 0.7
    F = f_scores(X, y)
    expected = np.array([brute_force_f(X[:, j], y) for j in range(X.shape[1])])
    np.testing.assert_allclose(F, expected, rtol=1e-10)


def test_agrees_with_sklearn(rng):
    X = rng.standard_normal((60, 30))
    y = rng.integers(0, 3, 60)
    np.testing.assert_allclose(f_scores(X, y), f_classif(X, y)[0], rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100) | st.floats(-100, -0.01), st.floats(-1e3, 1e3))
def test_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1, 2], 5)
    X = rng.standard_normal((15, 4)) + y[:, None] * rng.uniform(0, 1, 4)
    np.testing.assert_allclose(f_scores(a * X + b, y), f_scores(X, y), rtol=1e-8)


def test_select_top_m_examples():
    assert select_top_m([0.1, 5.0, 5.0, 2.0], 2).indices.tolist() == [1, 2]
    assert select_top_m([3, 1, 2], 1).indices.tolist() == [0]
    assert select_top_m([3, 1, 2], 3).indices.tolist() == [0, 1, 2]
    assert select_top_m([1.0, np.inf, 2.0, np.inf], 1).indices.tolist() == [1]
    with pytest.raises(ValueError):
        select_top_m([1, 2], 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from([0.0, 1.0, 2.5, 7.0, np.inf]), min_size=1, max_size=12), st.data())
def test_selection_invariants(f, data):
    m = data.draw(st.integers(0, len(f)))
    sel = select_top_m(f, m)
    f = np.asarray(f)
    idx = sel.indices
    assert len(idx) == m and np.all(np.diff(idx) > 0)
    rest = np.setdiff1d(np.arange(len(f)), idx)
    if m and len(rest):
        assert f[idx].min() >= f[rest].max()
        # a tie across the cut always keeps the lower index
        tied = rest[f[rest] == f[idx].min()]
        assert np.all(tied > idx[f[idx] == f[idx].min()].max())


def test_feature_selection_json():
    sel = select_top_m([1.0, np.inf, 0.5], 2)
    obj = json.loads(sel.to_json())
    assert obj == {"m": 2, "indices": [0, 1], "f_scores": [1.0, None, 0.5]}
    back = FeatureSelection.from_json(sel.to_json())
    np.testing.assert_array_equal(back.f_scores, sel.f_scores)
    np.testing.assert_array_equal(back.indices, sel.indices)


def test_selector_estimator(rng):
    y = np.repeat([0, 1, 2], 10)
    X = rng.standard_normal((30, 8))
    X[:, 5] += 3 * y
    X[:, 2] -= 2 * y
    sel = AnovaSelector(m=2).fit(X, y)
    assert sel.get_support(indices=True).tolist() == [2, 5]
    assert sel.get_support().sum() == 2
    np.testing.assert_array_equal(sel.transform(X), X[:, [2, 5]])
    assert sel.get_params() == {"m": 2}
    with pytest.raises(ValueError):
        sel.transform(X[:, :4])
