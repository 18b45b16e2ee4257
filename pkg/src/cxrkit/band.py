"""Score-space uncertainty band: calibrate on validation, drop ambiguous cases.

The operating threshold balances false-positive and false-negative rates; the
band around it widens on each side until a budgeted share of that side's
correctly classified validation cases would fall inside. Cases scoring inside
the closed interval are removed from evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import as_binary_array, as_float_array, check_same_length
from .agreement import ConfidenceCategory
from .exceptions import ConfigError, UndefinedMetricError


def _split_scores(scores, labels):
    s = as_float_array(scores, "scores", ndim=1)
    y = as_binary_array(labels, "labels", ndim=1)
    check_same_length(s, y, "scores", "labels")
    if s.size and (s.min() < 0.0 or s.max() > 1.0):
        raise ConfigError("band scores must be probabilities in [0, 1]")
    pos = s[y == 1.0]
    neg = s[y == 0.0]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("band calibration needs both classes")
    return s, pos, neg


def _midpoints(scores: np.ndarray) -> np.ndarray:
    distinct = np.unique(scores)
    if len(distinct) < 2:
        raise UndefinedMetricError("band calibration needs at least two distinct scores")
    return (distinct[:-1] + distinct[1:]) / 2.0


def calibrate_threshold(scores, labels) -> float:
    """Threshold minimizing |FPR - FNR| over adjacent-score midpoints.

    Prediction is positive for score > t. Ties in the objective resolve to
    the smallest candidate threshold.
    """
    _, pos, neg = _split_scores(scores, labels)
    candidates = _midpoints(np.concatenate([pos, neg]))
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    # counts at each candidate: positives at or below t miss, negatives above t false-fire
    fnr = np.searchsorted(pos_sorted, candidates, side="right") / len(pos)
    fpr = (len(neg) - np.searchsorted(neg_sorted, candidates, side="right")) / len(neg)
    gap = np.abs(fpr - fnr)
    best = np.flatnonzero(gap == gap.min())[0]  # candidates ascend, so first wins ties
    return float(candidates[best])


def _max_feasible_width(inside_count_at, candidates: np.ndarray, budget: int) -> float:
    feasible = [w for w in candidates if inside_count_at(w) <= budget]
    # width 0 can exceed the budget only when correct cases tie the threshold
    # exactly; the closed interval removes those regardless, so report 0
    return float(max(feasible)) if feasible else 0.0


def calibrate_widths(scores, labels, threshold: float, l_tp: float = 20.0,
                     l_tn: float = 20.0) -> tuple[float, float]:
    """Maximal band widths (rho_neg, rho_pos) honoring per-side budgets.

    At most l_tp percent of validation true positives may score inside
    (t, t + rho_pos], and at most l_tn percent of true negatives inside
    [t - rho_neg, t]. Each side is calibrated independently over candidate
    widths at adjacent-score midpoints plus the unit-interval caps.
    """
    s, pos, neg = _split_scores(scores, labels)
    t = float(threshold)
    for name, val in (("l_tp", l_tp), ("l_tn", l_tn)):
        if not 0.0 <= float(val) <= 100.0:
            raise ConfigError(f"{name} must be a percentage in [0, 100]")

    mids = _midpoints(s)
    tp = np.sort(pos[pos > t])           # correctly classified positives
    tn = np.sort(neg[neg <= t])          # correctly classified negatives
    tp_budget = int(np.floor(float(l_tp) / 100.0 * len(tp) + 1e-12))
    tn_budget = int(np.floor(float(l_tn) / 100.0 * len(tn) + 1e-12))

    right_candidates = np.concatenate([[0.0], mids[mids > t] - t, [max(0.0, 1.0 - t)]])
    rho_pos = _max_feasible_width(
        lambda w: int(np.searchsorted(tp, t + w, side="right")),
        right_candidates, tp_budget)

    left_candidates = np.concatenate([[0.0], t - mids[mids < t], [max(0.0, t)]])
    rho_neg = _max_feasible_width(
        lambda w: len(tn) - int(np.searchsorted(tn, t - w, side="left")),
        left_candidates, tn_budget)
    return rho_neg, rho_pos


@dataclass(frozen=True)
class BandParams:
    """Calibrated operating point: threshold and one-sided widths."""

    threshold: float
    rho_neg: float
    rho_pos: float
    l_tp: float = 20.0
    l_tn: float = 20.0

    def __post_init__(self):
        if self.rho_neg < 0 or self.rho_pos < 0:
            raise ConfigError("band widths must be non-negative")

    @property
    def interval(self) -> tuple[float, float]:
        """Closed removal interval, clamped to the unit interval."""
        return (max(0.0, self.threshold - self.rho_neg),
                min(1.0, self.threshold + self.rho_pos))

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "rho_neg": self.rho_neg,
                "rho_pos": self.rho_pos, "l_tp": self.l_tp, "l_tn": self.l_tn}

    @classmethod
    def from_dict(cls, d: dict) -> "BandParams":
        return cls(**{k: float(d[k]) for k in ("threshold", "rho_neg", "rho_pos",
                                               "l_tp", "l_tn")})


def calibrate_band(scores, labels, l_tp: float = 20.0, l_tn: float = 20.0) -> BandParams:
    """Threshold plus widths in one call."""
    t = calibrate_threshold(scores, labels)
    rho_neg, rho_pos = calibrate_widths(scores, labels, t, l_tp=l_tp, l_tn=l_tn)
    return BandParams(threshold=t, rho_neg=rho_neg, rho_pos=rho_pos,
                      l_tp=float(l_tp), l_tn=float(l_tn))


def apply_band(scores, params: BandParams):
    """Split indices into (retained, removed) by the closed removal interval."""
    s = as_float_array(scores, "scores", ndim=1)
    lo, hi = params.interval
    removed = (s >= lo) & (s <= hi)
    idx = np.arange(len(s))
    return idx[~removed], idx[removed]


@dataclass(frozen=True)
class BandReportRow:
    category: str
    before: int
    after: int
    retained_pct: float | None


def band_report(scores, categories, params: BandParams) -> list[BandReportRow]:
    """Per-confidence-category retention after band removal, plus a total row."""
    s = as_float_array(scores, "scores", ndim=1)
    cats = np.asarray(categories)
    check_same_length(s, cats, "scores", "categories")
    if cats.size and not np.all(np.isin(cats, [0, 1, 2, 3])):
        raise ConfigError("categories must be confidence codes 0..3")
    retained_idx, _ = apply_band(s, params)
    kept = np.zeros(len(s), dtype=bool)
    kept[retained_idx] = True
    rows = []
    for cat in ConfidenceCategory:
        sel = cats == int(cat)
        before = int(sel.sum())
        after = int((sel & kept).sum())
        pct = 100.0 * after / before if before else None
        rows.append(BandReportRow(cat.short_name, before, after, pct))
    rows.append(BandReportRow("total", len(s), int(kept.sum()),
                              100.0 * kept.sum() / len(s) if len(s) else None))
    return rows


class UncertaintyBand(BaseEstimator):
    """Estimator wrapper: fit calibrates on validation scores, predict filters.

    Attributes after fit: ``params_`` (BandParams), ``threshold_``,
    ``rho_neg_``, ``rho_pos_``.
    """

    def __init__(self, l_tp: float = 20.0, l_tn: float = 20.0):
        self.l_tp = l_tp
        self.l_tn = l_tn

    def fit(self, X, y):
        self.params_ = calibrate_band(X, y, l_tp=self.l_tp, l_tn=self.l_tn)
        self.threshold_ = self.params_.threshold
        self.rho_neg_ = self.params_.rho_neg
        self.rho_pos_ = self.params_.rho_pos
        return self

    def predict(self, X) -> np.ndarray:
        """Boolean mask, True where a score is retained."""
        self._check_fitted()
        retained, _ = apply_band(X, self.params_)
        mask = np.zeros(len(np.asarray(X)), dtype=bool)
        mask[retained] = True
        return mask

    def transform(self, X) -> np.ndarray:
        """The retained scores themselves."""
        return as_float_array(X, "scores", ndim=1)[self.predict(X)]

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("UncertaintyBand must be fit before use")
