"""
Synthetic multi-contrast phantom

Each subject gets:
- an ellipsoidal brain with smooth background texture per contrast
- a curved tube ("tract") whose intensity shifts with a latent severity score,
  signed per contrast
- off-tract distractor lesions with severity-independent intensity
- an age covariate mildly correlated with severity
- optionally a follow-up timepoint with perturbed severity

Voxel values are stored on a 2^-16 grid so that 1 - v is exact.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from errors import ConfigError, DataError
from trainer import SEVERE_THRESHOLD, Sample
from volume_io import read_volume, write_volume
from workers import run_bounded

logger = logging.getLogger(__name__)

GRID = 2.0 ** -16
MANIFEST_NAME = "manifest.json"


class PhantomConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_subjects: int = Field(120, ge=2)
    extents: Tuple[int, int, int] = (32, 32, 32)
    contrasts: int = Field(3, ge=1)
    effect_sizes: List[float] = Field(default_factory=lambda: [0.30, -0.25, -0.15])
    tract_radius: float = Field(2.5, gt=0)
    tract_jitter: float = Field(1.0, ge=0)
    lesion_count: int = Field(3, ge=0)
    lesion_radius: float = Field(2.0, gt=0)
    lesion_intensity: float = Field(0.25, ge=0, le=0.5)
    noise_std: float = Field(0.05, ge=0)
    texture_sigma: float = Field(2.0, gt=0)
    texture_amplitude: float = Field(0.08, ge=0)
    severe_fraction: float = Field(40 / 166, gt=0, lt=1)
    followup_fraction: float = Field(0.4, ge=0, le=1)
    followup_jitter: float = Field(1.0, ge=0)
    seed: int = Field(0, ge=0)
    null_control: bool = False

    @model_validator(mode="after")
    def _check(self) -> "PhantomConfig":
        if any(e < 16 for e in self.extents):
            raise ValueError(f"Phantom extents must be >= 16 per axis, got {self.extents}")
        if len(self.effect_sizes) != self.contrasts:
            raise ValueError(f"Got {len(self.effect_sizes)} effect sizes for {self.contrasts} contrasts")
        if not all(math.isfinite(e) and abs(e) <= 1 for e in self.effect_sizes):
            raise ValueError(f"Effect sizes must be finite and within [-1, 1]: {self.effect_sizes}")
        if not self.null_control and not any(self.effect_sizes):
            raise ValueError("At least one nonzero effect size is required (set null_control for an all-zero phantom)")
        return self

    def null(self) -> "PhantomConfig":
        """Same geometry with every effect size zeroed"""
        return self.model_copy(update={"effect_sizes": [0.0] * self.contrasts, "null_control": True})


@dataclass
class GroundTruth:
    """Planted regions per subject and latent severity per sample key"""
    tract: Dict[str, np.ndarray] = field(default_factory=dict)
    lesions: Dict[str, np.ndarray] = field(default_factory=dict)
    severity: Dict[str, float] = field(default_factory=dict)

    def tract_for(self, sample: Sample) -> np.ndarray:
        if sample.subject_id not in self.tract:
            raise DataError(f"No ground-truth tract for subject {sample.subject_id}")
        return self.tract[sample.subject_id]


@dataclass
class Anatomy:
    brain: np.ndarray        # (D, H, W) bool
    tract: np.ndarray        # (D, H, W) bool
    lesions: np.ndarray      # (D, H, W) bool
    texture: np.ndarray      # (L, D, H, W)


# ============================================================================
# GEOMETRY
# ============================================================================

def _coordinates(extents: Sequence[int]) -> np.ndarray:
    return np.indices(tuple(extents), dtype=np.float64)


def brain_mask(extents: Sequence[int]) -> np.ndarray:
    grid = _coordinates(extents)
    total = np.zeros(tuple(extents))
    for axis, extent in enumerate(extents):
        center = (extent - 1) / 2.0
        total += ((grid[axis] - center) / (0.46 * extent)) ** 2
    return total <= 1.0


def tract_centerline(extents: Sequence[int], offset: Sequence[float] = (0.0, 0.0, 0.0), points: int = 256) -> np.ndarray:
    """(points, 3) voxel coordinates of an arched tube running along the last axis"""
    d, h, w = (np.asarray(extents, dtype=np.float64) - 1)
    t = np.linspace(0.0, 1.0, points)
    line = np.stack([
        d / 2 + 0.1 * d * np.sin(2 * np.pi * t),
        h / 2 + 0.2 * h * (np.sin(np.pi * t) - 0.5),
        (0.22 + 0.56 * t) * w,
    ], axis=1)
    return line + np.asarray(offset, dtype=np.float64)


def _tract_mask(config: PhantomConfig, offset: np.ndarray, brain: np.ndarray) -> np.ndarray:
    line = tract_centerline(config.extents, offset)
    margin = config.tract_radius
    upper = np.asarray(config.extents, dtype=np.float64) - 1 - margin
    if np.any(line < margin) or np.any(line > upper):
        raise ConfigError(
            f"Tract of radius {config.tract_radius} does not fit extents {config.extents}; "
            f"increase extents or reduce tract_radius / tract_jitter"
        )
    seeds = np.ones(config.extents, dtype=bool)
    index = np.round(line).astype(int)
    seeds[index[:, 0], index[:, 1], index[:, 2]] = False
    tract = (ndimage.distance_transform_edt(seeds) <= config.tract_radius) & brain
    if not tract.any():
        raise ConfigError("Tract mask is empty inside the brain")
    return tract


def _lesion_mask(config: PhantomConfig, tract: np.ndarray, brain: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lesions = np.zeros(config.extents, dtype=bool)
    if config.lesion_count == 0:
        return lesions
    inside = ndimage.distance_transform_edt(brain) > config.lesion_radius + 0.5
    away = ndimage.distance_transform_edt(~tract) > config.lesion_radius + 2.0
    candidates = np.flatnonzero(inside & away)
    if candidates.size == 0:
        raise ConfigError("No room for distractor lesions away from the tract")
    grid = _coordinates(config.extents)
    for flat in rng.choice(candidates, size=config.lesion_count, replace=candidates.size < config.lesion_count):
        center = np.unravel_index(flat, config.extents)
        distance = sum((grid[axis] - center[axis]) ** 2 for axis in range(3))
        lesions |= distance <= config.lesion_radius ** 2
    return lesions & ~tract & brain


def _anatomy(config: PhantomConfig, rng: np.random.Generator) -> Anatomy:
    brain = brain_mask(config.extents)
    offset = np.clip(rng.normal(0.0, config.tract_jitter, size=3), -2 * config.tract_jitter, 2 * config.tract_jitter)
    tract = _tract_mask(config, offset, brain)
    lesions = _lesion_mask(config, tract, brain, rng)
    texture = np.zeros((config.contrasts,) + tuple(config.extents))
    for contrast in range(config.contrasts):
        smooth = ndimage.gaussian_filter(rng.normal(size=config.extents), config.texture_sigma)
        spread = smooth.std()
        texture[contrast] = config.texture_amplitude * smooth / (spread if spread > 0 else 1.0)
    return Anatomy(brain=brain, tract=tract, lesions=lesions, texture=texture)


# ============================================================================
# RENDERING
# ============================================================================

def tract_intensity(effect: float, severity: float) -> float:
    """Tract value before noise: centered on 0.5, spanning the effect size over severity 0..10"""
    return 0.5 - effect / 2.0 + effect * severity / 10.0


def quantize(volumes: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(volumes, 0.0, 1.0) / GRID) * GRID).astype(np.float32)


def render_volumes(config: PhantomConfig, anatomy: Anatomy, severity: float, rng: np.random.Generator) -> np.ndarray:
    """(L, D, H, W) volumes of one timepoint; background is zero outside the brain"""
    volumes = np.zeros((config.contrasts,) + tuple(config.extents))
    for contrast, effect in enumerate(config.effect_sizes):
        channel = np.where(anatomy.brain, 0.5 + anatomy.texture[contrast], 0.0)
        sign = 1.0 if effect >= 0 else -1.0
        channel[anatomy.lesions] += sign * config.lesion_intensity
        channel[anatomy.tract] = tract_intensity(effect, severity)
        volumes[contrast] = channel
    if config.noise_std > 0:
        noise = rng.normal(0.0, config.noise_std, size=volumes.shape)
        volumes = volumes + noise * anatomy.brain[None]
    return quantize(volumes)


def _severity(severe: bool, rng: np.random.Generator) -> float:
    # half-point steps; mild in [0, 4.5], severe in [5, 10]
    return float(rng.integers(10, 21)) / 2.0 if severe else float(rng.integers(0, 10)) / 2.0


def _age(severity: float, rng: np.random.Generator) -> float:
    return float(np.clip(30.0 + 3.0 * severity + rng.normal(0.0, 8.0), 18.0, 80.0))


def render_subject(
    config: PhantomConfig, index: int, severe: bool, seed: np.random.SeedSequence
) -> Tuple[List[Sample], Anatomy]:
    """All timepoints of one subject from its own seed stream"""
    anatomy_seed, noise_seed = seed.spawn(2)
    anatomy_rng = np.random.default_rng(anatomy_seed)
    noise_rng = np.random.default_rng(noise_seed)
    anatomy = _anatomy(config, anatomy_rng)
    severity = _severity(severe, anatomy_rng)
    age = _age(severity, anatomy_rng)
    subject_id = f"sub-{index:03d}"
    timepoints = [(severity, age)]
    if anatomy_rng.random() < config.followup_fraction:
        followup = float(np.clip(np.round(2 * (severity + anatomy_rng.normal(0.0, config.followup_jitter))) / 2, 0, 10))
        timepoints.append((followup, age + 2.0))
    samples = [
        Sample(
            volumes=render_volumes(config, anatomy, sev, noise_rng),
            brain_mask=anatomy.brain.copy(),
            age=years,
            severity=sev,
            label=int(sev >= SEVERE_THRESHOLD),
            subject_id=subject_id,
            timepoint=timepoint,
        )
        for timepoint, (sev, years) in enumerate(timepoints)
    ]
    return samples, anatomy


def generate(config: PhantomConfig, threads: Optional[int] = None) -> Tuple[List[Sample], GroundTruth]:
    """
    Generate the phantom dataset.

    The seed stream is split per subject, so output does not depend on the
    number of worker threads.

    Raises:
        ConfigError: The tract or lesions do not fit the configured extents
    """
    root = np.random.SeedSequence(config.seed)
    cohort_seed, *subject_seeds = root.spawn(config.n_subjects + 1)
    n_severe = max(1, int(round(config.severe_fraction * config.n_subjects)))
    severe = np.zeros(config.n_subjects, dtype=bool)
    severe[:n_severe] = True
    severe = np.random.default_rng(cohort_seed).permutation(severe)

    calls = [
        (lambda i=i: render_subject(config, i, bool(severe[i]), subject_seeds[i]))
        for i in range(config.n_subjects)
    ]
    results = run_bounded(calls, threads)

    dataset: List[Sample] = []
    truth = GroundTruth()
    for samples, anatomy in results:
        subject = samples[0].subject_id
        truth.tract[subject] = anatomy.tract
        truth.lesions[subject] = anatomy.lesions
        for sample in samples:
            truth.severity[sample.key] = sample.severity
        dataset.extend(samples)
    logger.info(
        f"✓ Generated phantom: {config.n_subjects} subjects, {len(dataset)} samples, "
        f"{n_severe} severe at baseline"
    )
    return dataset, truth


# ============================================================================
# SUMMARY
# ============================================================================

@dataclass
class DatasetSummary:
    samples: int
    subjects: int
    severe_fraction: float
    severity_histogram: List[int]
    histogram_edges: List[float]
    contrast_stats: List[Dict[str, float]]

    def to_dict(self) -> Dict:
        return {
            "samples": self.samples,
            "subjects": self.subjects,
            "severe_fraction": self.severe_fraction,
            "severity_histogram": self.severity_histogram,
            "histogram_edges": self.histogram_edges,
            "contrast_stats": self.contrast_stats,
        }


def summarize(dataset: Sequence[Sample]) -> DatasetSummary:
    """Class balance, severity histogram and per-contrast intensity statistics inside the brain"""
    if not dataset:
        raise DataError("Cannot summarize an empty dataset")
    severities = np.array([s.severity for s in dataset])
    counts, edges = np.histogram(severities, bins=np.arange(0, 11))
    stats = []
    for contrast in range(dataset[0].volumes.shape[0]):
        values = np.concatenate([s.volumes[contrast][s.brain_mask] for s in dataset])
        stats.append({
            "mean": float(values.mean()),
            "std": float(values.std()),
            "min": float(values.min()),
            "max": float(values.max()),
        })
    return DatasetSummary(
        samples=len(dataset),
        subjects=len({s.subject_id for s in dataset}),
        severe_fraction=float(np.mean([s.label for s in dataset])),
        severity_histogram=[int(c) for c in counts],
        histogram_edges=[float(e) for e in edges],
        contrast_stats=stats,
    )


# ============================================================================
# DATASET DIRECTORY
# ============================================================================

def save_dataset(
    dataset: Sequence[Sample],
    truth: GroundTruth,
    directory: Union[str, Path],
    config: Optional[PhantomConfig] = None,
) -> Path:
    """
    One VOL1 file per sample per contrast, VOL1 masks (0/1) and manifest.json.
    """
    root = Path(directory)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for sample in dataset:
        files = []
        for contrast, channel in enumerate(sample.volumes):
            name = f"volumes/{sample.key}_c{contrast}.vol"
            write_volume(root / name, channel)
            files.append(name)
        brain = f"masks/{sample.key}_brain.vol"
        write_volume(root / brain, sample.brain_mask.astype(np.float32))
        entries.append({
            "subject_id": sample.subject_id,
            "timepoint": sample.timepoint,
            "age": sample.age,
            "severity": sample.severity,
            "label": sample.label,
            "volumes": files,
            "brain_mask": brain,
        })
    subjects = {}
    for subject in sorted(truth.tract):
        tract, lesions = f"masks/{subject}_tract.vol", f"masks/{subject}_lesions.vol"
        write_volume(root / tract, truth.tract[subject].astype(np.float32))
        write_volume(root / lesions, truth.lesions[subject].astype(np.float32))
        baseline = min((s for s in dataset if s.subject_id == subject), key=lambda s: s.timepoint, default=None)
        subjects[subject] = {
            "tract": tract,
            "lesions": lesions,
            "baseline_label": baseline.label if baseline else None,
        }
    manifest = {
        "format": 1,
        "config": config.model_dump(mode="json") if config else None,
        "samples": entries,
        "subjects": subjects,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info(f"✓ Saved {len(entries)} samples to {root}")
    return root


def load_dataset(directory: Union[str, Path]) -> Tuple[List[Sample], GroundTruth]:
    """
    Raises:
        DataError: Missing directory, manifest or volume file, or corrupt volumes
    """
    root = Path(directory)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DataError(f"Dataset manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{manifest_path}: malformed manifest: {e}")
    dataset = []
    truth = GroundTruth()
    for entry in manifest["samples"]:
        volumes = np.concatenate([read_volume(root / name) for name in entry["volumes"]])
        sample = Sample(
            volumes=volumes,
            brain_mask=read_volume(root / entry["brain_mask"])[0] > 0.5,
            age=float(entry["age"]),
            severity=float(entry["severity"]),
            label=int(entry["label"]),
            subject_id=entry["subject_id"],
            timepoint=int(entry["timepoint"]),
        )
        truth.severity[sample.key] = sample.severity
        dataset.append(sample)
    for subject, files in manifest.get("subjects", {}).items():
        truth.tract[subject] = read_volume(root / files["tract"])[0] > 0.5
        truth.lesions[subject] = read_volume(root / files["lesions"])[0] > 0.5
    logger.info(f"✓ Loaded {len(dataset)} samples from {root}")
    return dataset, truth


def checksum(directory: Union[str, Path]) -> str:
    """SHA-256 over relative paths and contents of every file in the dataset directory"""
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"Dataset directory not found: {root}")
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()
