import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn import metrics as skm

from mvecho import metrics as MT
from mvecho.errors import DataError


def test_perfect_classifier():
    y = np.array([0, 0, 1, 1, 1])
    s = np.array([0.1, 0.2, 0.7, 0.8, 0.9])
    assert MT.roc_auc(y, s) == 1.0
    counts = MT.confusion_matrix(y, (s > 0.5).astype(int), 2)
    np.testing.assert_array_equal(MT.normalize_columns(counts), np.eye(2))


def test_random_scores_auc_near_half():
    rng = np.random.default_rng(0)
    y = np.repeat([0, 1], 500)
    aucs = [MT.roc_auc(y, rng.random(1000)) for _ in range(20)]
    assert all(abs(a - 0.5) <= 0.05 for a in aucs)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 60), st.integers(0, 10_000))
def test_auc_matches_sklearn(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    # coarse scores so ties are common
    s = rng.integers(0, 5, n) / 4.0
    assert MT.roc_auc(y, s) == pytest.approx(skm.roc_auc_score(y, s), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_auc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 50)
    y[:2] = [0, 1]
    s = rng.normal(size=50)
    base = MT.roc_auc(y, s)
    for f in (np.exp, lambda v: 3 * v - 7, lambda v: np.arctan(v), lambda v: v**3):
        assert MT.roc_auc(y, f(s)) == pytest.approx(base, abs=1e-15)


def test_auc_equals_mann_whitney():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 200)
    s = np.round(rng.normal(size=200), 1)
    pos, neg = s[y == 1], s[y == 0]
    u = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    assert MT.roc_auc(y, s) == pytest.approx(u / (len(pos) * len(neg)), abs=1e-12)


def test_auc_needs_both_classes():
    with pytest.raises(DataError):
        MT.roc_auc([1, 1], [0.3, 0.4])


def test_confusion_matches_sklearn_transposed():
    rng = np.random.default_rng(2)
    y, p = rng.integers(0, 3, 100), rng.integers(0, 3, 100)
    ours = MT.confusion_matrix(y, p, 3)
    np.testing.assert_array_equal(ours, skm.confusion_matrix(y, p, labels=[0, 1, 2]).T)
    norm = MT.normalize_columns(ours)
    np.testing.assert_allclose(norm.sum(axis=0), 1.0)
    np.testing.assert_allclose(norm, skm.confusion_matrix(y, p, labels=[0, 1, 2], normalize="true").T)


def test_empty_column_stays_zero():
    norm = MT.normalize_columns([[2, 0], [1, 0]])
    np.testing.assert_allclose(norm, [[2 / 3, 0], [1 / 3, 0]])


def test_macro_auc_matches_sklearn():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 3, 90)
    probs = rng.dirichlet(np.ones(3), 90)
    ours = MT.macro_auc(y, probs)
    assert ours == pytest.approx(skm.roc_auc_score(y, probs, multi_class="ovr", average="macro"), abs=1e-12)


def test_evaluate_report():
    y = np.array([0, 1, 2, 1, 0, 2])
    probs = np.eye(3)[y] * 0.8 + 0.2 / 3
    labels = probs.argmax(axis=1)
    rep = MT.evaluate(y, probs, labels, "three_class")
    assert rep["accuracy"] == 1.0 and rep["auc"] == 1.0 and rep["macro_auc"] == 1.0
    assert rep["confusion_normalized"] == np.eye(3).tolist()
    rep = MT.evaluate([1, 1], np.array([[0.2, 0.8], [0.4, 0.6]]), np.array([1, 1]), "binary")
    assert rep["auc"] is None and rep["accuracy"] == 1.0


def test_accuracy_validation():
    assert MT.accuracy([1, 0, 1], [1, 1, 1]) == pytest.approx(2 / 3)
    with pytest.raises(DataError):
        MT.accuracy([], [])
