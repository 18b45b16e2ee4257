"""Inter-rater agreement analytics over multi-reader binary annotations."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .exceptions import ShapeError, UndefinedMetricError


class ConfidenceCategory(IntEnum):
    """Label confidence from the positive-vote count of three readers."""

    HIGH_CONFIDENCE_NEGATIVE = 0
    LOW_CONFIDENCE_NEGATIVE = 1
    LOW_CONFIDENCE_POSITIVE = 2
    HIGH_CONFIDENCE_POSITIVE = 3

    @property
    def short_name(self) -> str:
        return _CATEGORY_SHORT_NAMES[self]


_CATEGORY_SHORT_NAMES = {
    ConfidenceCategory.HIGH_CONFIDENCE_NEGATIVE: "high_neg",
    ConfidenceCategory.LOW_CONFIDENCE_NEGATIVE: "low_neg",
    ConfidenceCategory.LOW_CONFIDENCE_POSITIVE: "low_pos",
    ConfidenceCategory.HIGH_CONFIDENCE_POSITIVE: "high_pos",
}


@dataclass(frozen=True)
class ReaderMatrix:
    """Binary votes shaped (cases, abnormalities, readers).

    ``original`` names the reader whose votes stand for the source labels;
    disagreement statistics are computed against it.
    """

    votes: np.ndarray
    abnormalities: tuple[str, ...]
    readers: tuple[str, ...]
    original: int = 0
    case_ids: tuple[str, ...] = ()

    def __post_init__(self):
        votes = np.asarray(self.votes)
        if votes.ndim != 3:
            raise ShapeError(f"votes must be (cases, abnormalities, readers), got {votes.shape}")
        if not np.all((votes == 0) | (votes == 1)):
            raise ShapeError("votes must be binary")
        n, k, r = votes.shape
        if r < 2:
            raise ShapeError("need at least two readers")
        if len(self.abnormalities) != k:
            raise ShapeError(f"{k} abnormality columns but {len(self.abnormalities)} names")
        if len(self.readers) != r:
            raise ShapeError(f"{r} reader columns but {len(self.readers)} names")
        if not 0 <= self.original < r:
            raise ShapeError(f"original reader index {self.original} out of range")
        ids = self.case_ids if self.case_ids else tuple(str(i) for i in range(n))
        if len(ids) != n:
            raise ShapeError(f"{n} cases but {len(ids)} case ids")
        object.__setattr__(self, "votes", votes.astype(np.int8))
        object.__setattr__(self, "abnormalities", tuple(self.abnormalities))
        object.__setattr__(self, "readers", tuple(self.readers))
        object.__setattr__(self, "case_ids", ids)

    @property
    def n_cases(self) -> int:
        return self.votes.shape[0]

    @property
    def n_readers(self) -> int:
        return self.votes.shape[2]

    def column(self, abnormality) -> np.ndarray:
        """Votes (cases, readers) for one abnormality, by name or index."""
        return self.votes[:, self._index(abnormality), :]

    def _index(self, abnormality) -> int:
        if isinstance(abnormality, str):
            try:
                return self.abnormalities.index(abnormality)
            except ValueError:
                raise KeyError(f"unknown abnormality {abnormality!r}") from None
        idx = int(abnormality)
        if not 0 <= idx < len(self.abnormalities):
            raise KeyError(f"abnormality index {idx} out of range")
        return idx


def _require_odd_readers(matrix: ReaderMatrix, what: str) -> None:
    if matrix.n_readers % 2 == 0:
        raise ShapeError(f"{what} needs an odd reader count, got {matrix.n_readers}")


def ppa_npa(matrix: ReaderMatrix, abnormality) -> tuple[float, float]:
    """Positive and negative percent agreement for one abnormality.

    PPA: among cases with at least one positive vote, the fraction where the
    majority is positive. NPA mirrors it on the negative side.
    """
    _require_odd_readers(matrix, "majority agreement")
    col = matrix.column(abnormality)
    r = matrix.n_readers
    pos_votes = col.sum(axis=1)
    any_pos = pos_votes >= 1
    any_neg = pos_votes <= r - 1
    if not any_pos.any():
        raise UndefinedMetricError("PPA undefined: no case has a positive vote")
    if not any_neg.any():
        raise UndefinedMetricError("NPA undefined: no case has a negative vote")
    ppa = float((pos_votes > r / 2).sum() / any_pos.sum())
    npa = float((pos_votes < r / 2).sum() / any_neg.sum())
    return ppa, npa


def positive_disagreement(matrix: ReaderMatrix, abnormality) -> float:
    """Fraction of original-positive cases that both other readers call negative."""
    if matrix.n_readers != 3:
        raise ShapeError("positive disagreement is defined for exactly three readers")
    col = matrix.column(abnormality)
    orig = col[:, matrix.original] == 1
    if not orig.any():
        raise UndefinedMetricError("positive disagreement undefined: original reader "
                                   "marked no case positive")
    others = np.delete(col, matrix.original, axis=1)
    overturned = orig & (others.sum(axis=1) == 0)
    return float(overturned.sum() / orig.sum())


def fleiss_kappa(matrix: ReaderMatrix, abnormality) -> float:
    """Fleiss' kappa over the two categories (positive, negative)."""
    col = matrix.column(abnormality).astype(np.float64)
    n, r = col.shape
    pos = col.sum(axis=1)
    counts = np.stack([pos, r - pos], axis=1)          # per-case category tallies
    p_case = ((counts ** 2).sum(axis=1) - r) / (r * (r - 1))
    p_bar = float(p_case.mean())
    margins = counts.sum(axis=0) / (n * r)
    p_expected = float((margins ** 2).sum())
    if p_expected == 1.0:
        raise UndefinedMetricError("kappa undefined: every vote falls in one category")
    return (p_bar - p_expected) / (1.0 - p_expected)


@dataclass(frozen=True)
class RelabelResult:
    """New labels plus the per-(case, abnormality) retention mask."""

    labels: np.ndarray
    retained: np.ndarray


def relabel(matrix: ReaderMatrix, strategy: str = "majority") -> RelabelResult:
    """Replace source labels by consensus.

    ``majority`` keeps every case and takes the majority vote (odd reader
    count required). ``complete_agreement`` keeps only unanimous entries, so
    the retained sets can differ between abnormalities.
    """
    pos = matrix.votes.sum(axis=2)                     # (cases, abnormalities)
    r = matrix.n_readers
    if strategy == "majority":
        _require_odd_readers(matrix, "majority relabeling")
        labels = (pos > r / 2).astype(np.float64)
        retained = np.ones(pos.shape, dtype=bool)
    elif strategy == "complete_agreement":
        labels = (pos == r).astype(np.float64)
        retained = (pos == 0) | (pos == r)
    else:
        raise ValueError(f"unknown relabel strategy {strategy!r}")
    return RelabelResult(labels=labels, retained=retained)


def confidence_categories(matrix: ReaderMatrix) -> np.ndarray:
    """Per-(case, abnormality) ConfidenceCategory codes; three readers only."""
    if matrix.n_readers != 3:
        raise ShapeError("confidence categories are defined for exactly three readers")
    return matrix.votes.sum(axis=2).astype(np.int64)


@dataclass
class AgreementRow:
    """One abnormality's agreement summary; None marks undefined statistics."""

    abnormality: str
    unanimous_positive: int
    unanimous_negative: int
    split: int
    ppa: float | None = None
    npa: float | None = None
    positive_disagreement: float | None = None
    kappa: float | None = None


def agreement_report(matrix: ReaderMatrix) -> list[AgreementRow]:
    """Per-abnormality agreement table; undefined statistics become None."""
    rows = []
    pos = matrix.votes.sum(axis=2)
    r = matrix.n_readers
    for k, name in enumerate(matrix.abnormalities):
        row = AgreementRow(
            abnormality=name,
            unanimous_positive=int((pos[:, k] == r).sum()),
            unanimous_negative=int((pos[:, k] == 0).sum()),
            split=int(((pos[:, k] > 0) & (pos[:, k] < r)).sum()),
        )
        try:
            row.ppa, row.npa = ppa_npa(matrix, k)
        except UndefinedMetricError:
            pass
        if r == 3:
            try:
                row.positive_disagreement = positive_disagreement(matrix, k)
            except UndefinedMetricError:
                pass
        try:
            row.kappa = fleiss_kappa(matrix, k)
        except UndefinedMetricError:
            pass
        rows.append(row)
    return rows
