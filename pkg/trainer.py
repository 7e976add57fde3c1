"""
Training loop for the multi-path network

Handles:
- Severity-weighted binary cross-entropy (weight = 2 - |severity - 5| / 5)
- Class-balanced weighted sampling with replacement
- Augmentation: flips, 90-degree rotations, random affine, Gaussian noise
- AdamW with decoupled weight decay
- Subject-level stratified k-fold cross-validation with a held-out test split
- Model selection per fold by validation AUC
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage
from scipy.spatial.transform import Rotation
from scipy.stats import rankdata

import tensorcore as tc
from errors import DataError, NumericError, ShapeError
from gamer_net import NetworkParams, NetworkSpec, build, forward_batch, predict

logger = logging.getLogger(__name__)

SEVERE_THRESHOLD = 5.0
PROBABILITY_CLAMP = 1e-7


# ============================================================================
# DATA TYPES
# ============================================================================

@dataclass
class Sample:
    """One subject timepoint: L contrast volumes, brain mask and covariates"""
    volumes: np.ndarray          # (L, D, H, W) in [0, 1]
    brain_mask: np.ndarray       # (D, H, W) bool
    age: float
    severity: float
    label: int
    subject_id: str
    timepoint: int = 0

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=np.float32)
        self.brain_mask = np.asarray(self.brain_mask, dtype=bool)
        if self.volumes.ndim != 4:
            raise ShapeError(f"{self.key}: volumes must be (L, D, H, W), got shape {self.volumes.shape}")
        if self.brain_mask.shape != self.volumes.shape[1:]:
            raise ShapeError(f"{self.key}: brain mask {self.brain_mask.shape} does not match volumes {self.volumes.shape}")
        if self.volumes.size and (self.volumes.min() < 0 or self.volumes.max() > 1):
            raise DataError(f"{self.key}: voxel values must lie in [0, 1]")
        if not 0 <= self.severity <= 10:
            raise DataError(f"{self.key}: severity {self.severity} outside [0, 10]")
        if int(self.label) != int(self.severity >= SEVERE_THRESHOLD):
            raise DataError(f"{self.key}: label {self.label} inconsistent with severity {self.severity}")
        if self.age < 0:
            raise DataError(f"{self.key}: age must be non-negative, got {self.age}")
        self.label = int(self.label)

    @property
    def key(self) -> str:
        return f"{self.subject_id}_t{self.timepoint}"

    def with_volumes(self, volumes: np.ndarray) -> "Sample":
        return replace(self, volumes=volumes)


class AugmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    flip: bool = True
    rotate90: bool = True
    affine: bool = True
    noise: bool = True
    probability: float = Field(0.5, ge=0, le=1)
    noise_std: float = Field(0.2, ge=0)
    max_rotation_deg: float = Field(30.0, ge=0)
    max_scale: float = Field(0.1, ge=0, lt=1)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(flip=False, rotate90=False, affine=False, noise=False)


class TrainConfig(BaseModel):
    """Optimizer, schedule and cross-validation settings"""
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(5e-5, gt=0)
    weight_decay: float = Field(1e-2, ge=0)
    batch_size: int = Field(16, ge=1)
    epochs: int = Field(30, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0)
    folds: int = Field(3, ge=2)
    test_fraction: float = Field(0.2, ge=0, lt=1)
    eval_batch_size: int = Field(16, ge=1)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    seed: int = 0


@dataclass
class FoldPlan:
    """k folds of subject ids plus the held-out test subjects"""
    folds: List[List[str]]
    test: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {"folds": self.folds, "test": self.test}


# ============================================================================
# LOSS AND METRICS
# ============================================================================

def sample_weight(severity: float) -> float:
    """2 - |severity - 5| / 5; maximal (2) at the severity threshold"""
    if not 0 <= severity <= 10:
        raise DataError(f"Severity {severity} outside [0, 10]")
    return 2.0 - abs(severity - SEVERE_THRESHOLD) / 5.0


def weighted_bce(probability: float, label: int, weight: float = 1.0) -> float:
    """weight * [-y log p - (1 - y) log(1 - p)]; p in {0, 1} is clamped and flagged"""
    p = float(probability)
    if p <= 0.0 or p >= 1.0:
        clamped = min(max(p, PROBABILITY_CLAMP), 1.0 - PROBABILITY_CLAMP)
        logger.warning(f"⚠ Probability {p} clamped to {clamped} in weighted BCE")
        p = clamped
    return weight * -(label * math.log(p) + (1 - label) * math.log(1.0 - p))


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Mann-Whitney AUC: fraction of (positive, negative) pairs ranked correctly,
    ties counted 0.5.

    Raises:
        DataError: If only one class is present
    """
    values = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(labels).astype(int) == 1
    n_pos = int(positive.sum())
    n_neg = int(positive.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError(f"AUC needs both classes, got {n_pos} positive and {n_neg} negative")
    ranks = rankdata(values)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ClassificationMetrics:
    auc: float
    accuracy: float
    sensitivity: float
    specificity: float
    count: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def classification_metrics(
    probabilities: Sequence[float], labels: Sequence[int], threshold: float = 0.5
) -> ClassificationMetrics:
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    predicted = (p >= threshold).astype(int)
    positives, negatives = y == 1, y == 0
    try:
        area = auc(p, y)
    except DataError:
        logger.warning("⚠ Single-class evaluation set; AUC undefined")
        area = float("nan")
    return ClassificationMetrics(
        auc=area,
        accuracy=float((predicted == y).mean()) if y.size else float("nan"),
        sensitivity=float(predicted[positives].mean()) if positives.any() else float("nan"),
        specificity=float((1 - predicted[negatives]).mean()) if negatives.any() else float("nan"),
        count=int(y.size),
    )


# ============================================================================
# AUGMENTATION AND SAMPLING
# ============================================================================

def rotate90(volume: np.ndarray, k: int, axes: Tuple[int, int]) -> np.ndarray:
    return np.rot90(volume, k, axes=axes)


def flip(volume: np.ndarray, axis: int) -> np.ndarray:
    return np.flip(volume, axis)


def affine_resample(
    volumes: np.ndarray, mask: np.ndarray, angles_deg: Sequence[float], zoom: float
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rotate and scale about the volume center; trilinear for images, nearest for
    the mask, out-of-field voxels filled by edge replication.
    """
    matrix = Rotation.from_euler("xyz", angles_deg, degrees=True).as_matrix() / zoom
    center = (np.asarray(mask.shape, dtype=np.float64) - 1) / 2.0
    offset = center - matrix @ center
    resampled = np.stack([
        ndimage.affine_transform(channel, matrix, offset=offset, order=1, mode="nearest")
        for channel in volumes
    ])
    new_mask = ndimage.affine_transform(mask.astype(np.float32), matrix, offset=offset, order=0, mode="nearest")
    return resampled.astype(np.float32), new_mask > 0.5


def augment(sample: Sample, rng: np.random.Generator, config: Optional[AugmentConfig] = None) -> Sample:
    """
    Random flips, 90-degree rotations, affine and Gaussian noise; the same
    geometric transform is applied to every contrast; output clamped to [0, 1].
    """
    cfg = config or AugmentConfig()
    volumes = sample.volumes.copy()
    mask = sample.brain_mask.copy()
    p = cfg.probability

    if cfg.flip:
        for axis in (1, 2, 3):
            if rng.random() < p:
                volumes = flip(volumes, axis)
                mask = flip(mask, axis - 1)
    if cfg.rotate90 and rng.random() < p:
        pairs = [(a, b) for a, b in ((1, 2), (1, 3), (2, 3)) if volumes.shape[a] == volumes.shape[b]]
        if pairs:
            a, b = pairs[int(rng.integers(len(pairs)))]
            k = int(rng.integers(1, 4))
            volumes = rotate90(volumes, k, (a, b))
            mask = np.rot90(mask, k, axes=(a - 1, b - 1))
    if cfg.affine and rng.random() < p:
        angles = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, size=3)
        zoom = rng.uniform(1.0 - cfg.max_scale, 1.0 + cfg.max_scale)
        volumes, mask = affine_resample(volumes, mask, angles, zoom)
    if cfg.noise and rng.random() < p:
        volumes = volumes + rng.normal(0.0, cfg.noise_std, size=volumes.shape)
    volumes = np.clip(volumes, 0.0, 1.0).astype(np.float32)
    return replace(sample, volumes=np.ascontiguousarray(volumes), brain_mask=np.ascontiguousarray(mask))


class WeightedSampler:
    """Class-balanced sampling with replacement (inverse class frequency)"""

    def __init__(self, labels: Sequence[int], rng: np.random.Generator):
        values = np.asarray(labels).astype(int)
        if values.size == 0:
            raise DataError("WeightedSampler needs at least one sample")
        classes, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
        if classes.size < 2:
            logger.warning(f"⚠ Only class {classes[0]} present; sampling uniformly")
        weights = 1.0 / counts[inverse]
        self.probabilities = weights / weights.sum()
        self.rng = rng

    def draw(self, n: int) -> np.ndarray:
        return self.rng.choice(self.probabilities.size, size=n, replace=True, p=self.probabilities)


# ============================================================================
# OPTIMIZER
# ============================================================================

@dataclass
class AdamWState:
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamWState,
    config: TrainConfig,
) -> Tuple[Dict[str, np.ndarray], AdamWState]:
    """
    One AdamW update, in place.

    Decoupled decay w <- w (1 - lr * wd) is applied before the Adam step.

    Raises:
        NumericError: Any non-finite gradient (nothing is modified)
        ShapeError: Gradient shape differs from its parameter
    """
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise ShapeError(f"Gradient for '{name}' has shape {grad.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"Non-finite gradient for '{name}'; step rejected")
    state.step += 1
    lr, decay = config.learning_rate, config.weight_decay
    beta1, beta2 = config.betas
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, grad in grads.items():
        weight = params[name]
        weight *= 1.0 - lr * decay
        first = state.first.setdefault(name, np.zeros(weight.shape, dtype=np.float64))
        second = state.second.setdefault(name, np.zeros(weight.shape, dtype=np.float64))
        first[...] = beta1 * first + (1.0 - beta1) * grad
        second[...] = beta2 * second + (1.0 - beta2) * grad * grad
        update = lr * (first / correction1) / (np.sqrt(second / correction2) + config.adam_eps)
        weight -= update.astype(weight.dtype)
    return params, state


# ============================================================================
# CROSS-VALIDATION SPLITS
# ============================================================================

def _subject_labels(dataset: Sequence[Sample]) -> Dict[str, int]:
    """Label of each subject's earliest timepoint"""
    earliest: Dict[str, Sample] = {}
    for sample in dataset:
        current = earliest.get(sample.subject_id)
        if current is None or sample.timepoint < current.timepoint:
            earliest[sample.subject_id] = sample
    return {subject: sample.label for subject, sample in earliest.items()}


def stratified_kfold(dataset: Sequence[Sample], k: int, seed: int, test_fraction: float = 0.0) -> FoldPlan:
    """
    Subject-level stratified split: an optional test split per class, then
    round-robin assignment of the remaining subjects to k folds. All
    timepoints of a subject share one fold (or the test split).

    Raises:
        DataError: A class has fewer than k cross-validation subjects
    """
    if k < 2:
        raise DataError(f"Need at least 2 folds, got {k}")
    labels = _subject_labels(dataset)
    rng = np.random.default_rng(seed)
    folds: List[List[str]] = [[] for _ in range(k)]
    test: List[str] = []
    cursor = 0
    for label in sorted(set(labels.values())):
        subjects = sorted(s for s, y in labels.items() if y == label)
        order = [subjects[i] for i in rng.permutation(len(subjects))]
        n_test = int(round(test_fraction * len(order)))
        test.extend(order[:n_test])
        remaining = order[n_test:]
        if len(remaining) < k:
            raise DataError(f"Class {label} has {len(remaining)} cross-validation subjects, need at least {k}")
        for subject in remaining:
            folds[cursor % k].append(subject)
            cursor += 1
    plan = FoldPlan(folds=[sorted(f) for f in folds], test=sorted(test))
    logger.info(f"✓ Fold plan: {[len(f) for f in plan.folds]} subjects per fold, {len(plan.test)} test subjects")
    return plan


# ============================================================================
# TRAINING
# ============================================================================

@dataclass
class FoldResult:
    fold: int
    params: NetworkParams
    best_epoch: int
    validation: ClassificationMetrics
    test: Optional[ClassificationMetrics]
    history: List[Dict[str, float]]
    attention_means: List[float]
    validation_keys: List[str]
    status: str = "ok"
    diagnostics: str = ""

    def to_dict(self) -> Dict:
        return {
            "fold": self.fold,
            "status": self.status,
            "diagnostics": self.diagnostics,
            "best_epoch": self.best_epoch,
            "validation": self.validation.to_dict(),
            "test": self.test.to_dict() if self.test else None,
            "attention_means": self.attention_means,
        }


def _batch_arrays(samples: Sequence[Sample]) -> Tuple[np.ndarray, List[float]]:
    return np.stack([s.volumes for s in samples]), [s.age for s in samples]


def _evaluate(samples: Sequence[Sample], params: NetworkParams, batch_size: int) -> ClassificationMetrics:
    probabilities, _, _ = predict(samples, params, batch_size)
    return classification_metrics(probabilities, [s.label for s in samples])


def _dataset_loss(samples: Sequence[Sample], params: NetworkParams, batch_size: int) -> float:
    probabilities, _, _ = predict(samples, params, batch_size)
    losses = [weighted_bce(p, s.label, sample_weight(s.severity)) for p, s in zip(probabilities, samples)]
    return float(np.mean(losses))


def attention_means(samples: Sequence[Sample], params: NetworkParams, batch_size: int = 16) -> List[float]:
    """Mean attention weight per contrast over correctly classified samples"""
    probabilities, _, weights = predict(samples, params, batch_size)
    labels = np.array([s.label for s in samples])
    correct = (probabilities >= 0.5).astype(int) == labels
    if not correct.any():
        logger.warning("⚠ No correctly classified samples; averaging attention over all samples")
        correct = np.ones_like(correct)
    return [float(v) for v in weights[correct].mean(axis=0)]


def train_fold(
    train: Sequence[Sample],
    validation: Sequence[Sample],
    spec: NetworkSpec,
    config: TrainConfig,
    seed: int,
    fold: int = 0,
    test: Sequence[Sample] = (),
) -> FoldResult:
    """
    Train one fold and keep the parameters of the best validation-AUC epoch.

    Epoch 0 is the untrained model. A non-finite loss or gradient aborts the
    fold (status "diverged") and keeps the best parameters seen so far.
    """
    params = build(spec, seed)
    rng = np.random.default_rng(seed)
    sampler = WeightedSampler([s.label for s in train], rng)
    state = AdamWState()
    history: List[Dict[str, float]] = []

    def record(epoch: int, loss: float) -> ClassificationMetrics:
        metrics = _evaluate(validation, params, config.eval_batch_size)
        history.append({
            "fold": fold, "epoch": epoch, "loss": loss, "auc": metrics.auc,
            "acc": metrics.accuracy, "sens": metrics.sensitivity, "spec": metrics.specificity,
        })
        logger.info(f"fold {fold} epoch {epoch}: loss {loss:.4f}, val AUC {metrics.auc:.3f}, acc {metrics.accuracy:.3f}")
        return metrics

    best_metrics = record(0, _dataset_loss(train, params, config.eval_batch_size))
    best_params, best_epoch = params.copy(), 0
    status, diagnostics = "ok", ""
    steps = math.ceil(len(train) / config.batch_size)
    try:
        for epoch in range(1, config.epochs + 1):
            losses = []
            for _ in range(steps):
                batch = [augment(train[i], rng, config.augment) for i in sampler.draw(config.batch_size)]
                volumes, ages = _batch_arrays(batch)
                leaves = params.leaves()
                out = forward_batch(volumes, ages, params, training=True, leaves=leaves)
                loss = tc.bce_with_logits(out.logits, [s.label for s in batch],
                                          [sample_weight(s.severity) for s in batch])
                if not np.isfinite(loss.item()):
                    raise NumericError(f"Non-finite training loss at epoch {epoch}")
                tc.backward(loss)
                grads = {name: leaf.grad for name, leaf in leaves.items() if leaf.grad is not None}
                adamw_step(params.tensors, grads, state, config)
                losses.append(loss.item())
            metrics = record(epoch, float(np.mean(losses)))
            if metrics.auc > best_metrics.auc or np.isnan(best_metrics.auc):
                best_metrics, best_params, best_epoch = metrics, params.copy(), epoch
    except NumericError as e:
        status, diagnostics = "diverged", str(e)
        logger.error(f"✗ Fold {fold} diverged: {e}")

    test_metrics = _evaluate(test, best_params, config.eval_batch_size) if len(test) else None
    result = FoldResult(
        fold=fold,
        params=best_params,
        best_epoch=best_epoch,
        validation=best_metrics,
        test=test_metrics,
        history=history,
        attention_means=attention_means(validation, best_params, config.eval_batch_size),
        validation_keys=[s.key for s in validation],
        status=status,
        diagnostics=diagnostics,
    )
    logger.info(f"✓ Fold {fold} done: best epoch {best_epoch}, val AUC {best_metrics.auc:.3f}")
    return result


@dataclass
class CVResult:
    plan: FoldPlan
    folds: List[FoldResult]
    selected_fold: int

    @property
    def selected(self) -> FoldResult:
        return self.folds[self.selected_fold]

    def to_frame(self) -> pd.DataFrame:
        rows = [row for fold in self.folds for row in fold.history]
        return pd.DataFrame(rows, columns=["fold", "epoch", "loss", "auc", "acc", "sens", "spec"])

    def summary(self) -> Dict:
        ok = [f for f in self.folds if f.status == "ok"] or self.folds
        frame = pd.DataFrame([f.validation.to_dict() for f in ok])
        return {
            "selected_fold": self.selected_fold,
            "mean_validation": {k: float(v) for k, v in frame[["auc", "accuracy", "sensitivity", "specificity"]].mean().items()},
            "folds": [f.to_dict() for f in self.folds],
            "plan": self.plan.to_dict(),
        }

    def evaluation_pool(self, dataset: Sequence[Sample], include_test: bool = True) -> List[Sample]:
        """Validation samples of the selected fold joined with the test split"""
        keys = set(self.selected.validation_keys)
        test_subjects = set(self.plan.test) if include_test else set()
        return [s for s in dataset if s.key in keys or s.subject_id in test_subjects]

    def write(self, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
        target = Path(out_dir)
        target.mkdir(parents=True, exist_ok=True)
        metrics_path = target / "metrics.csv"
        self.to_frame().to_csv(metrics_path, index=False)
        summary_path = target / "summary.json"
        summary_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        return metrics_path, summary_path


def train_cv(
    dataset: Sequence[Sample],
    spec: NetworkSpec,
    config: TrainConfig,
    plan: Optional[FoldPlan] = None,
) -> CVResult:
    """
    k-fold cross-validation: train on k - 1 folds, evaluate on the held-out fold
    and on the test split; the fold with the best validation AUC is selected.
    """
    plan = plan or stratified_kfold(dataset, config.folds, config.seed, config.test_fraction)
    test_subjects = set(plan.test)
    test = [s for s in dataset if s.subject_id in test_subjects]
    fold_seeds = np.random.SeedSequence(config.seed).generate_state(len(plan.folds))
    results = []
    for index, subjects in enumerate(plan.folds):
        held_out = set(subjects)
        validation = [s for s in dataset if s.subject_id in held_out]
        train = [s for s in dataset if s.subject_id not in held_out and s.subject_id not in test_subjects]
        logger.info(f"Fold {index}: {len(train)} train, {len(validation)} validation, {len(test)} test samples")
        results.append(train_fold(train, validation, spec, config, int(fold_seeds[index]), index, test))

    def score(result: FoldResult) -> float:
        if result.status != "ok" or np.isnan(result.validation.auc):
            return -np.inf
        return result.validation.auc

    selected = max(range(len(results)), key=lambda i: (score(results[i]), -i))
    logger.info(f"✓ Cross-validation done; selected fold {selected}")
    return CVResult(plan=plan, folds=results, selected_fold=selected)
