"""Ranking metrics for per-class probability scores."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from ._validation import as_binary_array, as_float_array, check_same_length
from .exceptions import UndefinedMetricError


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic.

    Tied score pairs across classes receive half credit. Needs at least one
    positive and one negative label; raises UndefinedMetricError otherwise.
    """
    s = as_float_array(scores, "scores", ndim=1)
    y = as_binary_array(labels, "labels", ndim=1)
    check_same_length(s, y, "scores", "labels")
    pos = y == 1.0
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"roc_auc needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def bootstrap_ci(scores, labels, n_resamples: int = 1000, alpha: float = 0.05,
                 seed: int = 0) -> tuple[float, float]:
    """Seeded percentile bootstrap interval for :func:`roc_auc`.

    Each resample draws its indices from an independent child generator keyed
    by (seed, resample index), so the interval does not depend on evaluation
    order. Resamples that come up single-class are redrawn within their own
    stream.
    """
    s = as_float_array(scores, "scores", ndim=1)
    y = as_binary_array(labels, "labels", ndim=1)
    roc_auc(s, y)  # validates lengths and that the point estimate is defined
    if n_resamples < 1:
        raise ValueError("n_resamples must be positive")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    n = len(s)
    aucs = np.empty(n_resamples)
    for i in range(n_resamples):
        rng = np.random.default_rng([int(seed), i])
        while True:
            idx = rng.integers(0, n, size=n)
            picked = y[idx]
            if picked.min() != picked.max():
                break
        aucs[i] = roc_auc(s[idx], picked)
    lo, hi = np.percentile(aucs, [100.0 * alpha / 2.0, 100.0 * (1.0 - alpha / 2.0)])
    return float(lo), float(hi)
