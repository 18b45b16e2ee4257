"""Training objectives and class weighting.

Three losses share one pattern: every term is multiplied by a constant mask
so that labels missing for a sample (classes from the other source dataset,
absent spatial labels, absent segmentation masks) contribute exactly zero to
the value and exactly zero gradient. No branching, no NaN paths.

Reduction convention: sum over classes (and pixels), mean over the samples
of a batch, so magnitudes do not scale with batch size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import as_binary_array
from .autodiff import Tensor, ops
from .exceptions import DegenerateClassError, ShapeError
from .model import ModelOutput

PROB_EPS = 1e-7        # probabilities are clamped to [eps, 1-eps] before logs


# ---------------------------------------------------------------- labels

@dataclass(frozen=True)
class LabelRecord:
    """Ground truth for one image.

    abnormality_labels, dataset_mask: length-D 0/1 vectors; the mask marks
    the classes annotated by this sample's source dataset.
    spatial_labels: length-F 0/1 vector, meaningful only when spatial_active.
    seg_mask: (2, N, N) 0/1 array (lung and heart), required when seg_active.
    """

    abnormality_labels: np.ndarray
    dataset_mask: np.ndarray
    spatial_labels: np.ndarray | None = None
    spatial_active: bool = False
    seg_mask: np.ndarray | None = None
    seg_active: bool = False

    def __post_init__(self):
        c = as_binary_array(self.abnormality_labels, "abnormality_labels", ndim=1)
        m = as_binary_array(self.dataset_mask, "dataset_mask", ndim=1)
        if c.shape != m.shape:
            raise ShapeError(f"labels {c.shape} and dataset_mask {m.shape} differ")
        object.__setattr__(self, "abnormality_labels", c)
        object.__setattr__(self, "dataset_mask", m)
        if self.spatial_active:
            if self.spatial_labels is None:
                raise ShapeError("spatial_active requires spatial_labels")
            b = as_binary_array(self.spatial_labels, "spatial_labels", ndim=1)
            object.__setattr__(self, "spatial_labels", b)
        if self.seg_active:
            if self.seg_mask is None:
                raise ShapeError("seg_active requires seg_mask")
            s = as_binary_array(self.seg_mask, "seg_mask", ndim=3)
            if s.shape[0] != 2 or s.shape[1] != s.shape[2]:
                raise ShapeError(f"seg_mask must be (2, N, N), got {s.shape}")
            object.__setattr__(self, "seg_mask", s)


@dataclass(frozen=True)
class LabelBatch:
    """Stacked labels for a batch.

    Row flags gate the optional targets; rows with a zero flag carry zero
    filler in the corresponding array. seg_masks is None when no row has one.
    """

    abnormality_labels: np.ndarray          # (B, D)
    dataset_masks: np.ndarray               # (B, D)
    spatial_labels: np.ndarray              # (B, F)
    spatial_active: np.ndarray              # (B,)
    seg_masks: np.ndarray | None            # (B, 2, N, N) or None
    seg_active: np.ndarray = field(default=None)  # (B,)

    def __post_init__(self):
        if self.seg_active is None:
            object.__setattr__(self, "seg_active",
                               np.zeros(len(self.abnormality_labels)))

    @classmethod
    def from_records(cls, records, num_spatial_classes: int | None = None) -> "LabelBatch":
        records = list(records)
        if not records:
            raise ShapeError("empty label batch")
        d = len(records[0].abnormality_labels)
        if any(len(r.abnormality_labels) != d for r in records):
            raise ShapeError("records disagree on the number of abnormality classes")
        fs = {len(r.spatial_labels) for r in records if r.spatial_active}
        if len(fs) > 1:
            raise ShapeError("records disagree on the number of spatial classes")
        f = fs.pop() if fs else (num_spatial_classes or 0)
        shapes = {r.seg_mask.shape for r in records if r.seg_active}
        if len(shapes) > 1:
            raise ShapeError("records disagree on segmentation mask shape")

        n = len(records)
        batch = cls(
            abnormality_labels=np.stack([r.abnormality_labels for r in records]),
            dataset_masks=np.stack([r.dataset_mask for r in records]),
            spatial_labels=np.zeros((n, f)),
            spatial_active=np.array([float(r.spatial_active) for r in records]),
            seg_masks=np.zeros((n,) + shapes.pop()) if shapes else None,
            seg_active=np.array([float(r.seg_active) for r in records]),
        )
        for i, r in enumerate(records):
            if r.spatial_active:
                batch.spatial_labels[i] = r.spatial_labels
            if r.seg_active:
                batch.seg_masks[i] = r.seg_mask
        return batch

    def __len__(self):
        return len(self.abnormality_labels)


def _as_batch(labels) -> LabelBatch:
    if isinstance(labels, LabelBatch):
        return labels
    if isinstance(labels, LabelRecord):
        return LabelBatch.from_records([labels])
    raise ShapeError(f"expected LabelRecord or LabelBatch, got {type(labels).__name__}")


# ---------------------------------------------------------------- weights

@dataclass(frozen=True)
class ClassWeights:
    """Per-class positive/negative term weights.

    w_pos = (P + N) / P and w_neg = (P + N) / N, from label counts over the
    samples where the class is annotated. Their reciprocals sum to one.
    """

    w_pos: np.ndarray
    w_neg: np.ndarray
    pos_counts: np.ndarray
    neg_counts: np.ndarray

    @classmethod
    def from_counts(cls, pos, neg) -> "ClassWeights":
        pos = np.asarray(pos, dtype=np.float64)
        neg = np.asarray(neg, dtype=np.float64)
        if pos.shape != neg.shape or pos.ndim != 1:
            raise ShapeError(f"count vectors must be 1-d and equal, got {pos.shape}, {neg.shape}")
        bad = np.flatnonzero((pos < 1) | (neg < 1))
        if bad.size:
            raise DegenerateClassError(
                f"classes {tuple(int(i) for i in bad)} lack positive or negative "
                "examples; their loss terms cannot be weighted",
                class_indices=tuple(int(i) for i in bad))
        total = pos + neg
        return cls(w_pos=total / pos, w_neg=total / neg,
                   pos_counts=pos, neg_counts=neg)

    def __len__(self):
        return len(self.w_pos)


def compute_class_weights(labels) -> ClassWeights:
    """Abnormality-class weights; counts only samples whose source dataset
    annotates the class (dataset_mask = 1)."""
    batch = labels if isinstance(labels, LabelBatch) else LabelBatch.from_records(labels)
    pos = (batch.dataset_masks * batch.abnormality_labels).sum(axis=0)
    neg = (batch.dataset_masks * (1.0 - batch.abnormality_labels)).sum(axis=0)
    return ClassWeights.from_counts(pos, neg)


def compute_spatial_weights(labels) -> ClassWeights:
    """Spatial-class weights; counts only samples with spatial labels."""
    batch = labels if isinstance(labels, LabelBatch) else LabelBatch.from_records(labels)
    active = batch.spatial_active[:, None]
    pos = (active * batch.spatial_labels).sum(axis=0)
    neg = (active * (1.0 - batch.spatial_labels)).sum(axis=0)
    return ClassWeights.from_counts(pos, neg)


# ---------------------------------------------------------------- losses

def _masked_cross_entropy(probs: Tensor, targets, mask, weights: ClassWeights) -> Tensor:
    """Mean over rows of sum_k -mask*(w_pos*t*log p + w_neg*(1-t)*log(1-p)).

    mask, targets are constants, so masked entries have identically zero
    value and gradient; clamping keeps the logs finite.
    """
    if probs.ndim != 2:
        raise ShapeError(f"expected (batch, classes) probabilities, got {probs.shape}")
    if probs.shape != targets.shape:
        raise ShapeError(f"probabilities {probs.shape} vs labels {targets.shape}")
    if probs.shape[1] != len(weights):
        raise ShapeError(f"{probs.shape[1]} classes but {len(weights)} weight pairs")
    a = mask * weights.w_pos * targets                 # positive-term coefficients
    b = mask * weights.w_neg * (1.0 - targets)
    p = ops.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    terms = ops.add(ops.mul(ops.log(p), a), ops.mul(ops.log(ops.sub(1.0, p)), b))
    return ops.mul(ops.reduce_sum(terms), -1.0 / probs.shape[0])


def abnormality_loss(probs, labels, weights: ClassWeights) -> Tensor:
    """Weighted binary cross-entropy over the classes each sample's source
    dataset annotates; other classes contribute exactly nothing."""
    batch = _as_batch(labels)
    probs = probs if isinstance(probs, Tensor) else Tensor(np.atleast_2d(probs))
    return _masked_cross_entropy(probs, batch.abnormality_labels,
                                 batch.dataset_masks, weights)


def location_loss(probs, labels, weights: ClassWeights) -> Tensor:
    """Weighted cross-entropy over spatial-region classes, gated per sample:
    rows without spatial labels contribute exactly nothing."""
    batch = _as_batch(labels)
    if not batch.spatial_active.any():
        return Tensor(0.0)
    probs = probs if isinstance(probs, Tensor) else Tensor(np.atleast_2d(probs))
    return _masked_cross_entropy(probs, batch.spatial_labels,
                                 batch.spatial_active[:, None], weights)


def segmentation_loss(pred, labels) -> Tensor:
    """Per-pixel mean squared error against the 2-channel mask, gated per
    sample; rows without a mask contribute exactly nothing."""
    batch = _as_batch(labels)
    if pred is None or batch.seg_masks is None or not batch.seg_active.any():
        return Tensor(0.0)
    if not isinstance(pred, Tensor):
        arr = np.asarray(pred, dtype=np.float64)
        pred = Tensor(arr[None] if arr.ndim == 3 else arr)
    if pred.ndim != 4 or pred.shape != batch.seg_masks.shape:
        raise ShapeError(f"prediction {pred.shape} vs masks {batch.seg_masks.shape}")
    t = float(np.prod(pred.shape[1:]))                 # 2*N*N pixels per sample
    scale = batch.seg_active[:, None, None, None] / (t * pred.shape[0])
    diff = ops.sub(pred, batch.seg_masks)
    return ops.reduce_sum(ops.mul(ops.mul(diff, diff), scale))


def global_loss(outputs: ModelOutput, labels, abnormality_weights: ClassWeights,
                spatial_weights: ClassWeights | None = None,
                scale=(1.0, 1.0, 1.0)) -> Tensor:
    """Sum of the three objectives, by default unweighted.

    ``scale`` rebalances (abnormality, segmentation, location); a zero entry
    disables that component entirely. The location term also needs
    ``spatial_weights`` to be enabled.
    """
    batch = _as_batch(labels)
    s_abn, s_seg, s_loc = (float(v) for v in scale)
    total = ops.mul(abnormality_loss(outputs.abnormality_probs, batch,
                                     abnormality_weights), s_abn)
    if s_seg and outputs.seg_map is not None:
        total = ops.add(total, ops.mul(segmentation_loss(outputs.seg_map, batch), s_seg))
    if s_loc and spatial_weights is not None:
        total = ops.add(total, ops.mul(location_loss(outputs.spatial_probs, batch,
                                                     spatial_weights), s_loc))
    return total
