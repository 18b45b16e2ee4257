"""Ranking metrics against the brute-force pair-count oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrkit.exceptions import NumericsError, ShapeError, UndefinedMetricError
from cxrkit.metrics import bootstrap_ci, roc_auc


def pair_count_auc(scores, labels):
    """Oracle: explicit walk over every (positive, negative) pair."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    credit = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                credit += 1.0
            elif p == n:
                credit += 0.5
    return credit / (len(pos) * len(neg))


def test_perfect_and_reversed_separation():
    labels = [0, 0, 1, 1]
    assert roc_auc([0.1, 0.2, 0.8, 0.9], labels) == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], labels) == 0.0


def test_constant_scores_give_half():
    assert roc_auc([0.4, 0.4, 0.4, 0.4], [0, 1, 0, 1]) == 0.5


def test_tied_pair_half_credit():
    assert roc_auc([0.3, 0.3], [0, 1]) == 0.5


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_matches_pair_count_oracle_exactly(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 120))
    scores = np.round(rng.uniform(size=n), 1)  # coarse grid forces ties
    labels = rng.integers(0, 2, size=n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    assert roc_auc(scores, labels) == pytest.approx(pair_count_auc(scores, labels), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_complement_and_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.uniform(size=30), 2)
    labels = np.r_[np.ones(10), np.zeros(20)]
    a = roc_auc(scores, labels)
    assert roc_auc(-scores, labels) == pytest.approx(1.0 - a, abs=1e-12)
    assert roc_auc(3.0 * scores + 7.0, labels) == a


def test_undefined_without_both_classes():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [0, 0])


def test_input_validation():
    with pytest.raises(ShapeError):
        roc_auc([0.1, 0.2, 0.3], [0, 1])
    with pytest.raises(ShapeError):
        roc_auc([0.1, 0.2], [0, 2])
    with pytest.raises(NumericsError):
        roc_auc([0.1, np.nan], [0, 1])


def test_bootstrap_deterministic_and_bounded():
    rng = np.random.default_rng(7)
    scores = rng.uniform(size=80)
    labels = (scores + rng.normal(scale=0.3, size=80) > 0.5).astype(float)
    first = bootstrap_ci(scores, labels, n_resamples=200, seed=11)
    second = bootstrap_ci(scores, labels, n_resamples=200, seed=11)
    assert first == second
    lo, hi = first
    assert 0.0 <= lo <= hi <= 1.0
    assert lo <= roc_auc(scores, labels) <= hi


def test_bootstrap_degenerate_perfect_classifier():
    scores = np.r_[np.full(20, 0.9), np.full(20, 0.1)]
    labels = np.r_[np.ones(20), np.zeros(20)]
    assert bootstrap_ci(scores, labels, n_resamples=100, seed=3) == (1.0, 1.0)


def test_bootstrap_narrows_with_more_data():
    rng = np.random.default_rng(5)

    def interval_width(n):
        scores = rng.uniform(size=n)
        labels = (scores + rng.normal(scale=0.4, size=n) > 0.5).astype(float)
        lo, hi = bootstrap_ci(scores, labels, n_resamples=300, seed=2)
        return hi - lo

    assert interval_width(400) < interval_width(40)


def test_bootstrap_redraws_single_class_resamples():
    # one positive among many: plenty of raw draws miss it, yet every kept
    # resample must contain both classes
    scores = np.r_[0.95, np.linspace(0.0, 0.5, 29)]
    labels = np.r_[1.0, np.zeros(29)]
    lo, hi = bootstrap_ci(scores, labels, n_resamples=150, seed=9)
    assert 0.0 <= lo <= hi <= 1.0
