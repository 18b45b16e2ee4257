"""Optimization loop and experiment harnesses.

Adam with bias correction, a reduce-on-plateau learning-rate schedule, and
patient-level data splitting. Training is bit-deterministic for a fixed
(config, data) pair: the split, the per-epoch batch order, and every update
derive from seeded generators, and nothing else is stochastic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import ConfigError, NumericsError, UndefinedMetricError
from .autodiff import backward, no_grad
from .losses import (ClassWeights, LabelBatch, LabelRecord,
                     compute_class_weights, compute_spatial_weights,
                     global_loss)
from .metrics import roc_auc
from .model import Model, ModelConfig, build_model

LOSS_NAMES = ("abn", "seg", "loc")
MIN_LR = 1e-6


# ---------------------------------------------------------------- samples

@dataclass(frozen=True)
class LabeledSample:
    """One image with its ground truth and provenance."""

    image: np.ndarray                  # (N, N) in [0, 1]
    labels: LabelRecord
    patient_id: str
    sample_id: str = ""


def _batch_of(samples, num_spatial_classes) -> tuple[np.ndarray, LabelBatch]:
    images = np.stack([s.image for s in samples])
    labels = LabelBatch.from_records([s.labels for s in samples],
                                     num_spatial_classes=num_spatial_classes)
    return images, labels


# ---------------------------------------------------------------- splitting

PARTITIONS = ("train", "val", "test")


@dataclass(frozen=True)
class SplitPlan:
    """Patient -> partition assignment; every image follows its patient."""

    assignment: dict
    fractions: tuple = (0.70, 0.10, 0.20)

    def patients(self, partition: str) -> tuple:
        return tuple(sorted(p for p, where in self.assignment.items()
                            if where == partition))

    def select(self, samples, partition: str) -> list:
        if partition not in PARTITIONS:
            raise ConfigError(f"unknown partition {partition!r}")
        return [s for s in samples if self.assignment.get(s.patient_id) == partition]


def split_by_patient(samples, fractions=(0.70, 0.10, 0.20), seed: int = 0) -> SplitPlan:
    """Deterministic patient-level split.

    Patients are sorted, shuffled by the seed, and dealt to partitions by
    largest remainder, so the plan does not depend on manifest order and
    honors the fractions within one patient.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigError(f"fractions must be three non-negatives summing to 1, got {fractions}")
    ids = sorted({s.patient_id for s in samples})
    if len(ids) < len(PARTITIONS):
        raise ConfigError(f"need at least {len(PARTITIONS)} patients, got {len(ids)}")
    order = list(np.array(ids, dtype=object)[np.random.default_rng(seed).permutation(len(ids))])

    counts = [math.floor(f * len(ids)) for f in fractions]
    remainders = [f * len(ids) - c for f, c in zip(fractions, counts)]
    for _ in range(len(ids) - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    assignment, start = {}, 0
    for partition, count in zip(PARTITIONS, counts):
        for pid in order[start:start + count]:
            assignment[pid] = partition
        start += count
    return SplitPlan(assignment=assignment, fractions=fractions)


# ---------------------------------------------------------------- optimizer

def init_adam_state(params) -> dict:
    """Zeroed first/second moment accumulators plus a step counter."""
    return {"step": 0,
            "m": {k: np.zeros(t.shape) for k, t in params.items()},
            "v": {k: np.zeros(t.shape) for k, t in params.items()}}


def adam_step(params, grads, state, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update, applied in place to the Tensors.

    ``grads`` maps the same names to arrays; a None gradient skips that
    parameter (it was not on the loss graph). Any non-finite gradient aborts
    the whole step before anything is mutated.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name!r}; step aborted")
    state["step"] += 1
    t = state["step"]
    correct1 = 1.0 - beta1 ** t
    correct2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / correct1) / (np.sqrt(v / correct2) + eps)
    return state


# ---------------------------------------------------------------- schedule

class PlateauSchedule:
    """Divide the learning rate when validation loss stops improving.

    An epoch improves when val loss beats the best seen by at least
    ``min_delta``; after ``patience`` consecutive non-improving epochs the
    rate is divided by ``factor`` and the counter resets.
    """

    def __init__(self, initial_lr: float, factor: float = 10.0, patience: int = 3,
                 min_delta: float = 1e-4, min_lr: float = MIN_LR):
        if factor <= 1.0:
            raise ConfigError(f"plateau factor must exceed 1, got {factor}")
        self.lr = float(initial_lr)
        self.factor = float(factor)
        self.patience = int(patience)
        self.min_delta = float(min_delta)
        self.min_lr = float(min_lr)
        self.best = math.inf
        self.bad_epochs = 0
        self.events = []                     # epoch indices where the rate dropped

    def update(self, epoch: int, val_loss: float) -> float:
        """Record one epoch's validation loss; returns the rate for the next."""
        if self.best - val_loss >= self.min_delta:      # improving by the delta counts
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr /= self.factor
                self.bad_epochs = 0
                self.events.append(epoch)
        return self.lr

    @property
    def exhausted(self) -> bool:
        return self.lr < self.min_lr


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    initial_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 10.0
    plateau_patience: int = 3
    plateau_min_delta: float = 1e-4
    max_epochs: int = 20
    seed: int = 0
    enabled_losses: tuple = LOSS_NAMES
    loss_scale: tuple = (1.0, 1.0, 1.0)
    split_fractions: tuple = (0.70, 0.10, 0.20)

    def __post_init__(self):
        object.__setattr__(self, "enabled_losses",
                           tuple(str(v).lower() for v in self.enabled_losses))
        unknown = set(self.enabled_losses) - set(LOSS_NAMES)
        if unknown:
            raise ConfigError(f"unknown losses {sorted(unknown)}; choose from {LOSS_NAMES}")
        if "abn" not in self.enabled_losses:
            raise ConfigError("the abnormality loss cannot be disabled")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if self.plateau_factor <= 1.0:
            raise ConfigError(f"plateau_factor must exceed 1, got {self.plateau_factor}")
        if len(self.loss_scale) != 3:
            raise ConfigError("loss_scale needs one entry per loss")
        if (len(self.split_fractions) != 3 or any(f < 0 for f in self.split_fractions)
                or abs(sum(self.split_fractions) - 1) > 1e-9):
            raise ConfigError("split_fractions must be three non-negatives summing to 1, "
                              f"got {self.split_fractions}")

    def effective_scale(self) -> tuple:
        return tuple(s if name in self.enabled_losses else 0.0
                     for name, s in zip(LOSS_NAMES, self.loss_scale))


# ---------------------------------------------------------------- history

@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    val_auc: tuple                      # per abnormality class; None if undefined


@dataclass
class TrainResult:
    model: Model
    history: list
    plan: SplitPlan
    class_weights: ClassWeights
    spatial_weights: ClassWeights | None
    stop_reason: str

    def final_val_auc(self) -> float:
        """Macro mean over the classes defined at the last epoch."""
        return macro_auc(self.history[-1].val_auc)


def macro_auc(aucs) -> float:
    """Mean over the defined (non-None) per-class AUCs."""
    defined = [a for a in aucs if a is not None]
    if not defined:
        raise UndefinedMetricError("no class had a defined AUC")
    return float(np.mean(defined))


def masked_class_aucs(probs: np.ndarray, batch: LabelBatch) -> tuple:
    """Per-class AUC over the samples whose source dataset annotates the
    class; None where only one label value is present."""
    out = []
    for n in range(probs.shape[1]):
        rows = batch.dataset_masks[:, n] == 1.0
        try:
            out.append(roc_auc(probs[rows, n], batch.abnormality_labels[rows, n]))
        except UndefinedMetricError:
            out.append(None)
    return tuple(out)


def evaluate_class_aucs(model: Model, samples, batch_size: int = 8) -> tuple:
    """Per-class AUC of the eval-mode model on held-out samples."""
    samples = list(samples)
    probs = predict_probs(model, [s.image for s in samples], batch_size)
    _, labels = _batch_of(samples, model.config.num_spatial_classes)
    return masked_class_aucs(probs, labels)


# ---------------------------------------------------------------- loop

def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def predict_probs(model: Model, images, batch_size: int = 8) -> np.ndarray:
    """Eval-mode abnormality probabilities, batched, graph-free."""
    images = np.asarray(images, dtype=np.float64)
    chunks = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            chunks.append(model.forward(images[i:i + batch_size])
                          .abnormality_probs.data)
    return np.concatenate(chunks) if chunks else np.zeros((0, 0))


def _mean_loss(model, samples, config, weights, spatial_weights, scale) -> float:
    total = 0.0
    with no_grad():
        for i in range(0, len(samples), config.batch_size):
            part = samples[i:i + config.batch_size]
            images, labels = _batch_of(part, model.config.num_spatial_classes)
            out = model.forward(images)
            total += global_loss(out, labels, weights, spatial_weights,
                                 scale=scale).item() * len(part)
    return total / len(samples)


def train(model: Model, samples, config: TrainConfig, plan: SplitPlan | None = None) -> TrainResult:
    """Fit the model on the train partition, scheduling on the val partition.

    Class weights are computed once from the train partition and frozen. Per
    epoch the history records the mean train loss (over samples), the val
    loss, the learning rate used, and per-class val AUC. Stops at max_epochs
    or when the plateau schedule drives the rate under 1e-6.
    """
    samples = list(samples)
    if plan is None:
        plan = split_by_patient(samples, config.split_fractions, seed=config.seed)
    parts = {name: plan.select(samples, name) for name in PARTITIONS}
    for name in ("train", "val"):
        if not parts[name]:
            raise ConfigError(f"the {name} partition is empty")

    f = model.config.num_spatial_classes
    train_labels = LabelBatch.from_records([s.labels for s in parts["train"]],
                                           num_spatial_classes=f)
    weights = compute_class_weights(train_labels)
    spatial_weights = None
    if "loc" in config.enabled_losses and train_labels.spatial_active.any():
        spatial_weights = compute_spatial_weights(train_labels)
    scale = config.effective_scale()

    state = init_adam_state(model.params)
    schedule = PlateauSchedule(config.initial_lr, config.plateau_factor,
                               config.plateau_patience, config.plateau_min_delta)
    val_images, val_labels = _batch_of(parts["val"], f)
    history = []
    stop_reason = "max_epochs"
    for epoch in range(config.max_epochs):
        lr = schedule.lr
        running, seen = 0.0, 0
        for idx in _epoch_batches(len(parts["train"]), config.batch_size,
                                  config.seed, epoch):
            chunk = [parts["train"][i] for i in idx]
            images, labels = _batch_of(chunk, f)
            model.zero_grad()
            out = model.forward(images, training=True)
            loss = global_loss(out, labels, weights, spatial_weights, scale=scale)
            backward(loss)
            adam_step(model.params, {k: t.grad for k, t in model.params.items()},
                      state, lr, config.beta1, config.beta2, config.adam_eps)
            running += loss.item() * len(chunk)
            seen += len(chunk)

        val_loss = _mean_loss(model, parts["val"], config, weights,
                              spatial_weights, scale)
        val_probs = predict_probs(model, val_images, config.batch_size)
        history.append(EpochStats(epoch=epoch, train_loss=running / seen,
                                  val_loss=val_loss, lr=lr,
                                  val_auc=masked_class_aucs(val_probs, val_labels)))
        schedule.update(epoch, val_loss)
        if schedule.exhausted:
            stop_reason = "lr_floor"
            break
    return TrainResult(model=model, history=history, plan=plan,
                       class_weights=weights, spatial_weights=spatial_weights,
                       stop_reason=stop_reason)


def write_history_csv(history, fp) -> None:
    """Fixed-order CSV: epoch, losses, lr, then one AUC column per class."""
    import csv
    rows = list(history)
    n_classes = len(rows[0].val_auc) if rows else 0
    writer = csv.writer(fp, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_loss", "lr"]
                    + [f"auc_{i}" for i in range(n_classes)])
    for r in rows:
        writer.writerow([r.epoch, repr(float(r.train_loss)), repr(float(r.val_loss)),
                         repr(float(r.lr))]
                        + ["" if a is None else repr(float(a)) for a in r.val_auc])


# ---------------------------------------------------------------- experiments

def run_paired_experiment(samples, model_config: ModelConfig, config: TrainConfig,
                          seeds=(0, 1, 2, 3, 4)) -> dict:
    """Train a classification-only arm and an all-losses arm per seed.

    Both arms share the seed (identical init, split, and batch order), so
    each pair differs only in which losses produce gradients. Returns
    per-seed macro val and test AUCs, their means, and the per-seed test
    deltas (multitask minus baseline).
    """
    results = {"seeds": tuple(seeds), "baseline": [], "multitask": [],
               "baseline_test": [], "multitask_test": []}
    for seed in seeds:
        for arm, losses in (("baseline", ("abn",)), ("multitask", LOSS_NAMES)):
            m = build_model(replace(model_config, seed=seed))
            cfg = replace(config, seed=seed, enabled_losses=losses)
            outcome = train(m, samples, cfg)
            results[arm].append(outcome.final_val_auc())
            held_out = outcome.plan.select(list(samples), "test")
            results[arm + "_test"].append(
                macro_auc(evaluate_class_aucs(outcome.model, held_out,
                                              config.batch_size)))
    for key in ("baseline", "multitask", "baseline_test", "multitask_test"):
        results[key + "_mean"] = float(np.mean(results[key]))
    results["test_deltas"] = tuple(
        m - b for m, b in zip(results["multitask_test"], results["baseline_test"]))
    return results


class MultiTaskClassifier:
    """Estimator front end: fit on images + label records, predict per-class
    probabilities. Thin adapter over :func:`build_model` and :func:`train`.

    ``y`` may be a (n, D) 0/1 array (every class treated as annotated for
    every sample) or a sequence of :class:`LabelRecord` carrying masks and
    auxiliary targets. Follows the sklearn parameter protocol, so it clones.
    """

    def __init__(self, model_config: ModelConfig | None = None,
                 train_config: TrainConfig | None = None):
        self.model_config = model_config
        self.train_config = train_config

    def get_params(self, deep: bool = True) -> dict:
        return {"model_config": self.model_config, "train_config": self.train_config}

    def set_params(self, **params) -> "MultiTaskClassifier":
        for key, value in params.items():
            if key not in self.get_params():
                raise ConfigError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def _records(self, y) -> list:
        if len(y) and isinstance(y[0], LabelRecord):
            return list(y)
        arr = np.asarray(y, dtype=np.float64)
        if arr.ndim != 2:
            raise ConfigError(f"y must be (n, classes) or LabelRecords, got shape {arr.shape}")
        return [LabelRecord(abnormality_labels=row, dataset_mask=np.ones_like(row))
                for row in arr]

    def fit(self, X, y, patient_ids=None) -> "MultiTaskClassifier":
        X = np.asarray(X, dtype=np.float64)
        records = self._records(y)
        if X.ndim != 3 or len(X) != len(records):
            raise ConfigError(f"X must be (n, N, N) matching y, got {X.shape}")
        if patient_ids is None:
            patient_ids = [f"p{i}" for i in range(len(records))]
        samples = [LabeledSample(image=img, labels=rec, patient_id=str(pid),
                                 sample_id=f"s{i}")
                   for i, (img, rec, pid) in enumerate(zip(X, records, patient_ids))]
        config = self.model_config
        if config is None:
            config = ModelConfig(input_size=X.shape[-1],
                                 num_abnormality_classes=len(records[0].abnormality_labels))
        train_config = self.train_config or TrainConfig()
        self.model_ = build_model(config)
        self.result_ = train(self.model_, samples, train_config)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ConfigError("estimator is not fitted")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        batch = (self.train_config or TrainConfig()).batch_size
        return predict_probs(self.model_, X, batch)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int64)


def run_size_sweep(samples, model_config: ModelConfig, config: TrainConfig,
                   fractions=(0.25, 0.5, 1.0), seed: int = 0) -> list:
    """Retrain on nested patient subsets of the train partition.

    Patient subsets are nested (a smaller fraction is a prefix of a larger
    one under the same shuffle), isolating the effect of training-set size.
    Returns one dict per fraction with the achieved macro val AUC.
    """
    samples = list(samples)
    plan = split_by_patient(samples, config.split_fractions, seed=seed)
    train_patients = list(plan.patients("train"))
    order = list(np.array(train_patients, dtype=object)[
        np.random.default_rng([seed, 1]).permutation(len(train_patients))])
    rows = []
    for fraction in fractions:
        keep = set(order[:max(1, math.ceil(float(fraction) * len(order)))])
        assignment = {pid: part for pid, part in plan.assignment.items()
                      if part != "train" or pid in keep}
        sub_plan = SplitPlan(assignment=assignment, fractions=plan.fractions)
        sub_samples = [s for s in samples if s.patient_id in assignment]
        m = build_model(replace(model_config, seed=seed))
        outcome = train(m, sub_samples, replace(config, seed=seed), plan=sub_plan)
        rows.append({"fraction": float(fraction),
                     "train_patients": len(keep),
                     "val_auc": outcome.final_val_auc(),
                     "class_aucs": outcome.history[-1].val_auc})
    return rows
