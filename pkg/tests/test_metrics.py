import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miltransfer.errors import DataError, UndefinedMetricError
from miltransfer.metrics import (
    auroc,
    balanced_accuracy,
    bootstrap,
    evaluate_records,
    quadratic_weighted_kappa,
)


# ---------------------------------------------------------------------------
# auroc
# ---------------------------------------------------------------------------

def test_auroc_perfect_and_inverted():
    scores = np.array([0.9, 0.8, 0.2, 0.1])
    labels = np.array([1, 1, 0, 0])
    assert auroc(scores, labels) == 1.0
    assert auroc(scores, 1 - labels) == 0.0


def test_auroc_ties_half():
    # pairs: (0.6,0.6)->0.5, (0.6,0.4)->1, (0.4,0.6)->0, (0.4,0.4)->0.5  => 0.5
    scores = np.array([0.6, 0.4, 0.6, 0.4])
    labels = np.array([1, 0, 0, 1])
    assert auroc(scores, labels) == pytest.approx(0.5, abs=1e-12)


def test_auroc_single_class_error():
    with pytest.raises(UndefinedMetricError):
        auroc(np.array([0.1, 0.2]), np.array([1, 1]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_auroc_monotone_transform_invariant(seed):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal(30)
    labels = rng.integers(0, 2, 30)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    a = auroc(scores, labels)
    assert auroc(np.exp(scores * 2.0) + 5.0, labels) == pytest.approx(a, abs=1e-12)
    assert a + auroc(scores, 1 - labels) == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------------------
# balanced accuracy
# ---------------------------------------------------------------------------

def test_balanced_accuracy_examples():
    assert balanced_accuracy([0, 1, 2], [0, 1, 2], 3) == 1.0
    # recalls (1.0, 0.5) on a 4-sample vector
    assert balanced_accuracy([0, 0, 1, 0], [0, 0, 1, 1], 2) == pytest.approx(0.75)
    # constant predictor over balanced classes
    preds = [0] * 30
    labels = [0] * 10 + [1] * 10 + [2] * 10
    assert balanced_accuracy(preds, labels, 3) == pytest.approx(1 / 3)


def test_balanced_accuracy_excludes_absent_classes():
    assert balanced_accuracy([0, 1], [0, 1], 5) == 1.0


def test_balanced_accuracy_relabel_invariant():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 4, 50)
    preds = rng.integers(0, 4, 50)
    perm = np.array([2, 0, 3, 1])
    a = balanced_accuracy(preds, labels, 4)
    assert balanced_accuracy(perm[preds], perm[labels], 4) == pytest.approx(a, abs=1e-12)


# ---------------------------------------------------------------------------
# quadratic weighted kappa
# ---------------------------------------------------------------------------

def test_kappa_identity_and_reversal():
    assert quadratic_weighted_kappa([0, 1, 2], [0, 1, 2], 3) == 1.0
    assert quadratic_weighted_kappa([2, 1, 0], [0, 1, 2], 3) == pytest.approx(-1.0)


def test_kappa_degenerate_agreement():
    assert quadratic_weighted_kappa([1, 1, 1], [1, 1, 1], 3) == 1.0


def test_kappa_random_permutation_near_zero():
    rng = np.random.default_rng(8)
    labels = rng.integers(0, 4, 4000)
    preds = rng.permutation(labels)
    assert abs(quadratic_weighted_kappa(preds, labels, 4)) < 0.05


def test_kappa_symmetric():
    rng = np.random.default_rng(9)
    labels = rng.integers(0, 5, 60)
    preds = rng.integers(0, 5, 60)
    assert quadratic_weighted_kappa(preds, labels, 5) == pytest.approx(
        quadratic_weighted_kappa(labels, preds, 5), abs=1e-12)


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

def test_bootstrap_identical_records_zero_std():
    labels = np.array([0, 1] * 10)
    preds = labels.copy()
    fn = lambda y, v: float((y == v).mean())
    mean, std, skipped = bootstrap(labels, preds, fn, n_bootstrap=200, seed=0)
    assert mean == 1.0 and std == 0.0 and skipped == 0


def test_bootstrap_deterministic():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 2, 50)
    scores = rng.random(50)
    fn = lambda y, v: auroc(v, y)
    assert bootstrap(labels, scores, fn, 300, seed=42) == bootstrap(labels, scores, fn, 300, seed=42)


def test_bootstrap_accuracy_std_matches_binomial():
    rng = np.random.default_rng(2)
    labels = np.zeros(100, dtype=int)
    preds = (rng.random(100) < 0.5).astype(int)  # ~Bernoulli(0.5) accuracy
    fn = lambda y, v: float((y == v).mean())
    _, std, _ = bootstrap(labels, preds, fn, n_bootstrap=1000, seed=3)
    assert abs(std - 0.05) < 0.015


def test_bootstrap_skips_degenerate_resamples():
    labels = np.array([1] * 19 + [0])
    scores = np.linspace(0, 1, 20)
    fn = lambda y, v: auroc(v, y)
    mean, std, skipped = bootstrap(labels, scores, fn, n_bootstrap=500, seed=5)
    assert skipped > 0
    assert 0.0 <= mean <= 1.0


def test_bootstrap_needs_two_records():
    with pytest.raises(DataError):
        bootstrap(np.array([1]), np.array([0.5]), lambda y, v: 1.0)


def test_evaluate_records_json_round_trip():
    res = evaluate_records("auroc", 2, ["a", "b", "c", "d"], [0, 1, 0, 1],
                           [0.1, 0.9, 0.3, 0.7], n_bootstrap=100, seed=0,
                           context={"arch": "abmil"})
    from miltransfer.metrics import EvalResult
    back = EvalResult.from_json(res.to_json())
    assert back.value == res.value
    assert back.metric_name == "auroc"
    assert back.context["arch"] == "abmil"
