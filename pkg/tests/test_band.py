"""Uncertainty band calibration against exhaustive-scan oracles."""

import numpy as np
import pytest
from sklearn.base import clone

from cxrkit.band import (
    BandParams,
    UncertaintyBand,
    apply_band,
    band_report,
    calibrate_band,
    calibrate_threshold,
    calibrate_widths,
)
from cxrkit.exceptions import ConfigError, UndefinedMetricError


def threshold_oracle(scores, labels):
    """Scan every midpoint candidate with loop-counted rates."""
    distinct = sorted(set(scores))
    candidates = [(a + b) / 2.0 for a, b in zip(distinct, distinct[1:])]
    best_t, best_gap = None, None
    for t in candidates:
        fn = sum(1 for s, y in zip(scores, labels) if y == 1 and s <= t)
        fp = sum(1 for s, y in zip(scores, labels) if y == 0 and s > t)
        n_pos = sum(1 for y in labels if y == 1)
        gap = abs(fp / (len(labels) - n_pos) - fn / n_pos)
        if best_gap is None or gap < best_gap:  # strict: first (smallest t) wins ties
            best_t, best_gap = t, gap
    return best_t


def widths_oracle(scores, labels, t, l_tp, l_tn):
    """Independent brute force: loop candidates, loop-count band membership."""
    distinct = sorted(set(scores))
    mids = [(a + b) / 2.0 for a, b in zip(distinct, distinct[1:])]
    tp = [s for s, y in zip(scores, labels) if y == 1 and s > t]
    tn = [s for s, y in zip(scores, labels) if y == 0 and s <= t]
    tp_budget = int(np.floor(l_tp / 100.0 * len(tp) + 1e-12))
    tn_budget = int(np.floor(l_tn / 100.0 * len(tn) + 1e-12))

    best_pos = 0.0
    for w in [0.0] + [m - t for m in mids if m > t] + [max(0.0, 1.0 - t)]:
        if sum(1 for s in tp if t < s <= t + w) <= tp_budget:
            best_pos = max(best_pos, w)
    best_neg = 0.0
    for w in [0.0] + [t - m for m in mids if m < t] + [max(0.0, t)]:
        if sum(1 for s in tn if t - w <= s <= t) <= tn_budget:
            best_neg = max(best_neg, w)
    return best_neg, best_pos


def seeded_scores(seed, n=200):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n).astype(float)
    scores = np.clip(0.5 + (labels - 0.5) * rng.uniform(0.0, 0.8, size=n)
                     + rng.normal(scale=0.15, size=n), 0.0, 1.0)
    scores = np.round(scores, 3)  # collisions exercise tie handling
    return scores, labels


def test_threshold_balances_error_rates():
    assert calibrate_threshold([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.375)


def test_threshold_for_separated_classes_sits_in_the_gap():
    scores = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9]
    labels = [0, 0, 0, 1, 1, 1]
    assert calibrate_threshold(scores, labels) == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(5))
def test_threshold_matches_scan_oracle(seed):
    scores, labels = seeded_scores(seed)
    assert calibrate_threshold(scores, labels) == threshold_oracle(scores, labels)


@pytest.mark.parametrize("seed", range(5))
def test_widths_match_brute_force_oracle(seed):
    scores, labels = seeded_scores(seed + 100)
    t = calibrate_threshold(scores, labels)
    got = calibrate_widths(scores, labels, t, l_tp=20, l_tn=20)
    assert got == widths_oracle(scores, labels, t, 20, 20)


@pytest.mark.parametrize("seed", range(3))
def test_inside_band_budgets_honored(seed):
    scores, labels = seeded_scores(seed + 200)
    params = calibrate_band(scores, labels, l_tp=20, l_tn=20)
    t = params.threshold
    tp = scores[(labels == 1) & (scores > t)]
    tn = scores[(labels == 0) & (scores <= t)]
    tp_inside = ((tp > t) & (tp <= t + params.rho_pos)).sum()
    tn_inside = ((tn >= t - params.rho_neg) & (tn <= t)).sum()
    assert tp_inside / len(tp) <= 0.20 + 1.0 / len(tp)
    assert tn_inside / len(tn) <= 0.20 + 1.0 / len(tn)


def test_zero_budget_admits_no_correct_cases():
    scores, labels = seeded_scores(42)
    params = calibrate_band(scores, labels, l_tp=0, l_tn=0)
    t = params.threshold
    inside = (scores >= t - params.rho_neg) & (scores <= t + params.rho_pos)
    correct = ((labels == 1) & (scores > t)) | ((labels == 0) & (scores <= t))
    assert not np.any(inside & correct)


def test_width_extends_through_an_empty_neighborhood():
    # no positives until 0.9; with one inside-case allowed, the right edge
    # lands on the midpoint just past the first true positive
    scores = [0.1, 0.2, 0.3, 0.4, 0.5, 0.90, 0.92, 0.94, 0.96, 0.98]
    labels = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1]
    t = calibrate_threshold(scores, labels)
    assert t == pytest.approx(0.7)
    rho_neg, rho_pos = calibrate_widths(scores, labels, t, l_tp=20, l_tn=0)
    assert t + rho_pos == pytest.approx((0.90 + 0.92) / 2)
    # left side: zero budget, nearest true negative at 0.5
    assert t - rho_neg > 0.5


def test_smaller_budget_never_widens():
    scores, labels = seeded_scores(7)
    t = calibrate_threshold(scores, labels)
    loose = calibrate_widths(scores, labels, t, l_tp=20, l_tn=20)
    tight = calibrate_widths(scores, labels, t, l_tp=5, l_tn=5)
    assert tight[0] <= loose[0] and tight[1] <= loose[1]


def test_apply_band_closed_interval():
    params = BandParams(threshold=0.5, rho_neg=0.1, rho_pos=0.2)
    scores = [0.39, 0.40, 0.5, 0.70, 0.71]
    retained, removed = apply_band(scores, params)
    assert list(removed) == [1, 2, 3]  # both endpoints inclusive
    assert list(retained) == [0, 4]


def test_band_params_interval_clamped():
    params = BandParams(threshold=0.1, rho_neg=0.5, rho_pos=1.5)
    assert params.interval == (0.0, 1.0)
    with pytest.raises(ConfigError):
        BandParams(threshold=0.5, rho_neg=-0.1, rho_pos=0.0)


def test_band_report_counts():
    params = BandParams(threshold=0.5, rho_neg=0.15, rho_pos=0.15)
    scores = np.array([0.05, 0.1, 0.45, 0.5, 0.55, 0.9, 0.95])
    cats = np.array([0, 0, 1, 2, 2, 3, 3])
    rows = band_report(scores, cats, params)
    by_name = {r.category: r for r in rows}
    assert by_name["high_neg"].before == 2 and by_name["high_neg"].after == 2
    assert by_name["low_neg"].before == 1 and by_name["low_neg"].after == 0
    assert by_name["low_pos"].before == 2 and by_name["low_pos"].after == 0
    assert by_name["high_pos"].before == 2 and by_name["high_pos"].after == 2
    assert by_name["low_neg"].retained_pct == 0.0
    total = by_name["total"]
    assert total.before == 7 and total.after == 4
    assert sum(r.before for r in rows if r.category != "total") == total.before


def test_estimator_wrapper_matches_functions():
    scores, labels = seeded_scores(11)
    est = UncertaintyBand(l_tp=10, l_tn=10).fit(scores, labels)
    direct = calibrate_band(scores, labels, l_tp=10, l_tn=10)
    assert est.params_ == direct
    test_scores = seeded_scores(12)[0]
    mask = est.predict(test_scores)
    retained, removed = apply_band(test_scores, direct)
    assert np.array_equal(np.flatnonzero(mask), retained)
    assert np.array_equal(est.transform(test_scores), test_scores[mask])
    assert clone(est).get_params() == {"l_tp": 10, "l_tn": 10}


def test_calibration_errors():
    with pytest.raises(UndefinedMetricError):
        calibrate_threshold([0.2, 0.4], [1, 1])
    with pytest.raises(UndefinedMetricError):
        calibrate_threshold([0.3, 0.3, 0.3], [0, 1, 0])
    with pytest.raises(ConfigError):
        calibrate_widths([0.2, 0.8], [0, 1], 0.5, l_tp=120)
    with pytest.raises(ConfigError):
        calibrate_threshold([-0.2, 0.8], [0, 1])
    with pytest.raises(RuntimeError):
        UncertaintyBand().predict([0.5])
