"""
Assessment of relevance maps

Handles:
- The twelve comparison scenarios (anchor x method x map mode)
- Quantile masks over positive relevance inside the brain
- Voxel inversion (v -> 1 - v) and the resulting AUC curves
- Equal-volume random-mask controls
- Masked-mean correlation with severity and permutation p-values
- Dice overlap with planted ground truth
- PGM slice montages
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import rankdata

from attribution import (
    RuleConfig,
    canonize,
    combined_map,
    integrated_gradients,
    lrp_attention_maps,
    lrp_backward,
    saliency,
)
from errors import ConfigError, DataError, ShapeError
from gamer_net import NetworkParams, forward, predict
from phantom import GroundTruth
from trainer import Sample, auc
from workers import run_bounded

logger = logging.getLogger(__name__)

DEFAULT_QUANTILES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
CORRELATION_QUANTILES = (0.3, 0.4, 0.5)
RANK_QUANTILE = 0.4

_mapping_logged = False


# ============================================================================
# SCENARIOS
# ============================================================================

class ScenarioConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    id: int = Field(ge=1, le=12)
    anchor: Literal["attention", "logit"]
    method: Literal["lrp-proposed", "lrp-all", "saliency", "integrated-gradients"]
    map_mode: Literal["individual", "combined"]

    @model_validator(mode="after")
    def _check(self) -> "ScenarioConfig":
        if self.id <= 8 and not self.is_lrp:
            raise ValueError(f"Scenario {self.id} must use an LRP method")
        if self.id > 8 and (self.is_lrp or self.map_mode != "individual"):
            raise ValueError(f"Scenario {self.id} must be a gradient baseline with individual maps")
        return self

    @property
    def is_lrp(self) -> bool:
        return self.method.startswith("lrp")

    @property
    def variant(self) -> str:
        return "lrp-all" if self.method == "lrp-all" else "proposed"

    @property
    def label(self) -> str:
        anchor = "AW" if self.anchor == "attention" else "logit"
        return f"S{self.id} {anchor}/{self.method}/{self.map_mode}"


def _scenarios() -> Dict[int, ScenarioConfig]:
    table = {}
    index = 1
    for anchor in ("attention", "logit"):
        for mode in ("individual", "combined"):
            for method in ("lrp-proposed", "lrp-all"):
                table[index] = ScenarioConfig(id=index, anchor=anchor, method=method, map_mode=mode)
                index += 1
    for anchor in ("attention", "logit"):
        for method in ("saliency", "integrated-gradients"):
            table[index] = ScenarioConfig(id=index, anchor=anchor, method=method, map_mode="individual")
            index += 1
    return table


SCENARIOS: Dict[int, ScenarioConfig] = _scenarios()


def resolve_scenarios(ids: Optional[Sequence[int]] = None) -> List[ScenarioConfig]:
    if ids is None:
        return list(SCENARIOS.values())
    unknown = [i for i in ids if i not in SCENARIOS]
    if unknown:
        raise ConfigError(f"Unknown scenario ids {unknown}; valid ids are 1-12")
    return [SCENARIOS[i] for i in sorted(set(ids))]


def _log_mapping_once() -> None:
    global _mapping_logged
    if not _mapping_logged:
        logger.warning(
            "Baseline scenarios: 9 = saliency@AW, 10 = integrated gradients@AW, "
            "11 = saliency@logit, 12 = integrated gradients@logit (individual maps)"
        )
        _mapping_logged = True


# ============================================================================
# MASKS AND INVERSION
# ============================================================================

@dataclass
class QuantileMask:
    mask: np.ndarray                 # (D, H, W) bool
    quantile: float
    scenario: Optional[int]
    count: int
    flagged: bool = False            # no positive relevance inside the brain


def quantile_mask(
    relevance: np.ndarray, brain: np.ndarray, q: float, scenario: Optional[int] = None
) -> QuantileMask:
    """
    Top-q fraction of strictly positive relevance voxels inside the brain.

    round(q * n) voxels are selected in order of decreasing relevance; ties go
    to the lower flat voxel index.

    Raises:
        ConfigError: q outside [0, 1]
        ShapeError: Map and brain mask extents differ
    """
    if not 0.0 <= q <= 1.0:
        raise ConfigError(f"Quantile must lie in [0, 1], got {q}")
    values = np.asarray(relevance, dtype=np.float64)
    brain = np.asarray(brain, dtype=bool)
    if values.shape != brain.shape:
        raise ShapeError(f"Relevance map {values.shape} does not match brain mask {brain.shape}")
    candidates = np.flatnonzero(brain & (values > 0))
    mask = np.zeros(values.shape, dtype=bool)
    if candidates.size == 0:
        logger.warning(f"⚠ No positive relevance inside the brain (scenario {scenario}); empty mask")
        return QuantileMask(mask=mask, quantile=q, scenario=scenario, count=0, flagged=True)
    count = int(np.floor(q * candidates.size + 0.5))
    order = np.lexsort((candidates, -values.flat[candidates]))
    mask.flat[candidates[order[:count]]] = True
    return QuantileMask(mask=mask, quantile=q, scenario=scenario, count=count)


MaskSet = Union[QuantileMask, Sequence[QuantileMask]]


def _per_contrast(masks: MaskSet, contrasts: int) -> List[np.ndarray]:
    if isinstance(masks, QuantileMask):
        return [masks.mask] * contrasts
    if len(masks) != contrasts:
        raise ShapeError(f"Got {len(masks)} masks for {contrasts} contrasts")
    return [m.mask for m in masks]


def invert_voxels(sample: Sample, masks: MaskSet) -> Sample:
    """
    v -> 1 - v inside the mask.

    A single QuantileMask (combined mode) applies to every contrast; a
    sequence (individual mode) gives each contrast its own mask.
    """
    volumes = sample.volumes.copy()
    for contrast, mask in enumerate(_per_contrast(masks, volumes.shape[0])):
        if mask.shape != volumes.shape[1:]:
            raise ShapeError(f"Mask {mask.shape} does not match volume extents {volumes.shape[1:]}")
        volumes[contrast][mask] = 1.0 - volumes[contrast][mask]
    return sample.with_volumes(volumes)


def masked_mean(sample: Sample, masks: Union[MaskSet, np.ndarray]) -> np.ndarray:
    """Mean of each contrast under its mask (one shared mask or one per contrast)"""
    contrasts = sample.volumes.shape[0]
    if isinstance(masks, np.ndarray):
        per = [masks.astype(bool)] * contrasts
    else:
        per = _per_contrast(masks, contrasts)
    means = np.zeros(contrasts)
    for contrast, mask in enumerate(per):
        if mask.shape != sample.volumes.shape[1:]:
            raise ShapeError(f"Mask {mask.shape} does not match volume extents {sample.volumes.shape[1:]}")
        if not mask.any():
            raise DataError(f"Empty mask for contrast {contrast} of {sample.key}")
        means[contrast] = sample.volumes[contrast][mask].astype(np.float64).mean()
    return means


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"Dice needs equal extents, got {a.shape} and {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 0.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


# ============================================================================
# STATISTICS
# ============================================================================

def _centered_ranks(values: np.ndarray) -> np.ndarray:
    ranks = rankdata(values)
    return ranks - ranks.mean()


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Pearson correlation of average-ranked data.

    Raises:
        DataError: Length mismatch, fewer than 3 values or zero rank variance
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError(f"spearman needs two equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 3:
        raise DataError(f"spearman needs at least 3 values, got {x.size}")
    rx, ry = _centered_ranks(x), _centered_ranks(y)
    denominator = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denominator == 0:
        raise DataError("Zero rank variance; Spearman correlation undefined")
    return float((rx * ry).sum() / denominator)


def permutation_test(
    x: Sequence[float], y: Sequence[float], n: int = 20000, seed: int = 0, chunk: int = 1000
) -> float:
    """Two-sided permutation p-value of Spearman's rho: (1 + #{|rho_perm| >= |rho_obs|}) / (n + 1)"""
    if n < 1:
        raise ConfigError(f"Need at least one permutation, got {n}")
    observed = abs(spearman(x, y))
    rx = _centered_ranks(np.asarray(x, dtype=np.float64))
    ry = _centered_ranks(np.asarray(y, dtype=np.float64))
    denominator = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    rng = np.random.default_rng(seed)
    exceed = 0
    for start in range(0, n, chunk):
        rows = min(chunk, n - start)
        shuffled = rng.permuted(np.tile(ry, (rows, 1)), axis=1)
        rhos = np.abs(shuffled @ rx) / denominator
        exceed += int(np.count_nonzero(rhos >= observed - 1e-12))
    return (1 + exceed) / (n + 1)


# ============================================================================
# SCENARIO MAPS
# ============================================================================

def _sample_maps(
    sample: Sample,
    params: NetworkParams,
    canonical: NetworkParams,
    scenarios: Sequence[ScenarioConfig],
    rules: RuleConfig,
    ig_steps: int,
) -> Dict[int, np.ndarray]:
    cache: Dict[Tuple[str, str], np.ndarray] = {}
    trace = None

    def individual(anchor: str, method: str) -> np.ndarray:
        nonlocal trace
        key = (anchor, method)
        if key in cache:
            return cache[key]
        if method.startswith("lrp"):
            if trace is None:
                _, _, trace = forward(sample, canonical)
            variant_rules = rules.model_copy(update={"variant": "lrp-all" if method == "lrp-all" else "proposed"})
            if anchor == "attention":
                bundle = lrp_attention_maps(trace, canonical, variant_rules)
            else:
                bundle = lrp_backward(trace, canonical, "logit", variant_rules)
            cache[key] = bundle.maps
            cache[key + ("combined",)] = combined_map(bundle, sample)
        elif method == "saliency":
            cache[key] = saliency(sample, params, anchor)
        else:
            cache[key] = integrated_gradients(sample, params, anchor, steps=ig_steps)
        return cache[key]

    maps = {}
    for scenario in scenarios:
        individual_maps = individual(scenario.anchor, scenario.method)
        if scenario.map_mode == "combined":
            maps[scenario.id] = cache[(scenario.anchor, scenario.method, "combined")]
        else:
            maps[scenario.id] = individual_maps
    return maps


def compute_scenario_maps(
    samples: Sequence[Sample],
    params: NetworkParams,
    scenarios: Optional[Sequence[ScenarioConfig]] = None,
    rules: Optional[RuleConfig] = None,
    ig_steps: int = 64,
    threads: Optional[int] = None,
) -> Dict[int, List[np.ndarray]]:
    """
    Relevance maps for every sample and scenario.

    Returns:
        scenario id -> list (one per sample) of (L, D, H, W) individual maps or
        (D, H, W) combined maps
    """
    scenarios = list(scenarios) if scenarios is not None else list(SCENARIOS.values())
    if any(s.id > 8 for s in scenarios):
        _log_mapping_once()
    rules = rules or RuleConfig()
    canonical = canonize(params)
    calls = [
        (lambda s=s: _sample_maps(s, params, canonical, scenarios, rules, ig_steps))
        for s in samples
    ]
    per_sample = run_bounded(calls, threads)
    logger.info(f"✓ Computed relevance maps for {len(samples)} samples x {len(scenarios)} scenarios")
    return {s.id: [maps[s.id] for maps in per_sample] for s in scenarios}


# ============================================================================
# INVERSION CURVES
# ============================================================================

def scenario_masks(sample: Sample, relevance: np.ndarray, q: float, scenario: Optional[int] = None) -> MaskSet:
    """Shared mask for a combined (D, H, W) map, one mask per contrast for an (L, D, H, W) map"""
    if relevance.ndim == 3:
        return quantile_mask(relevance, sample.brain_mask, q, scenario)
    if relevance.shape != sample.volumes.shape:
        raise ShapeError(f"Relevance maps {relevance.shape} do not match sample {sample.volumes.shape}")
    return [quantile_mask(channel, sample.brain_mask, q, scenario) for channel in relevance]


def random_masks(sample: Sample, reference: MaskSet, rng: np.random.Generator) -> MaskSet:
    """Masks with the same voxel counts drawn uniformly from the brain"""
    inside = np.flatnonzero(sample.brain_mask)

    def draw(template: QuantileMask) -> QuantileMask:
        mask = np.zeros(sample.brain_mask.shape, dtype=bool)
        mask.flat[rng.choice(inside, size=template.count, replace=False)] = True
        return QuantileMask(mask=mask, quantile=template.quantile, scenario=None, count=template.count)

    if isinstance(reference, QuantileMask):
        return draw(reference)
    return [draw(m) for m in reference]


def _pool_auc(samples: Sequence[Sample], params: NetworkParams, batch_size: int) -> float:
    probabilities, _, _ = predict(samples, params, batch_size)
    return auc(probabilities, [s.label for s in samples])


def _check_maps(samples: Sequence[Sample], maps: Sequence[np.ndarray]) -> None:
    if len(maps) != len(samples) or any(m is None for m in maps):
        raise DataError(f"Relevance maps missing: {len(samples)} samples, {len(maps)} maps")


def inversion_curve(
    samples: Sequence[Sample],
    params: NetworkParams,
    maps: Sequence[np.ndarray],
    quantiles: Sequence[float] = DEFAULT_QUANTILES,
    scenario: Optional[int] = None,
    batch_size: int = 16,
) -> List[float]:
    """AUC of the frozen model after inverting each sample under its own top-q mask"""
    _check_maps(samples, maps)
    curve = []
    for q in quantiles:
        perturbed = [invert_voxels(s, scenario_masks(s, m, q, scenario)) for s, m in zip(samples, maps)]
        curve.append(_pool_auc(perturbed, params, batch_size))
    return curve


def random_control_curve(
    samples: Sequence[Sample],
    params: NetworkParams,
    maps: Sequence[np.ndarray],
    quantiles: Sequence[float] = DEFAULT_QUANTILES,
    seed: int = 0,
    batch_size: int = 16,
) -> List[float]:
    """Inversion under random brain masks matching each scenario mask's voxel count, seeded per sample"""
    _check_maps(samples, maps)
    curve = []
    for q in quantiles:
        perturbed = []
        for index, (sample, relevance) in enumerate(zip(samples, maps)):
            rng = np.random.default_rng([seed, index])
            control = random_masks(sample, scenario_masks(sample, relevance, q), rng)
            perturbed.append(invert_voxels(sample, control))
        curve.append(_pool_auc(perturbed, params, batch_size))
    return curve


def _mean_dice(masks: MaskSet, truth: np.ndarray) -> float:
    if isinstance(masks, QuantileMask):
        return dice(masks.mask, truth)
    return float(np.mean([dice(m.mask, truth) for m in masks]))


def localization_dice(
    samples: Sequence[Sample],
    maps: Sequence[np.ndarray],
    truth: GroundTruth,
    q: float = RANK_QUANTILE,
    seed: int = 0,
) -> Tuple[float, float]:
    """Mean Dice of top-q masks and of equal-volume random masks against the planted tract"""
    _check_maps(samples, maps)
    scores, controls = [], []
    for index, (sample, relevance) in enumerate(zip(samples, maps)):
        masks = scenario_masks(sample, relevance, q)
        tract = truth.tract_for(sample)
        scores.append(_mean_dice(masks, tract))
        controls.append(_mean_dice(random_masks(sample, masks, np.random.default_rng([seed, index])), tract))
    return float(np.mean(scores)), float(np.mean(controls))


# ============================================================================
# CORRELATION WITH SEVERITY
# ============================================================================

def correlation_table(
    samples: Sequence[Sample],
    maps: Dict[int, Sequence[np.ndarray]],
    quantiles: Sequence[float] = CORRELATION_QUANTILES,
    n_permutations: int = 20000,
    seed: int = 0,
) -> pd.DataFrame:
    """
    Spearman rho between severity and the per-contrast mean under each
    scenario's masks, with permutation p-values.

    Samples whose mask is empty for a contrast are left out of that contrast.
    """
    rows = []
    contrasts = samples[0].volumes.shape[0] if samples else 0
    for scenario_id, scenario_maps in maps.items():
        _check_maps(samples, scenario_maps)
        for q in quantiles:
            means = np.full((len(samples), contrasts), np.nan)
            for index, (sample, relevance) in enumerate(zip(samples, scenario_maps)):
                masks = _per_contrast(scenario_masks(sample, relevance, q, scenario_id), contrasts)
                for contrast, mask in enumerate(masks):
                    if mask.any():
                        means[index, contrast] = sample.volumes[contrast][mask].astype(np.float64).mean()
            severity = np.array([s.severity for s in samples])
            for contrast in range(contrasts):
                keep = ~np.isnan(means[:, contrast])
                rho, p = float("nan"), float("nan")
                try:
                    rho = spearman(means[keep, contrast], severity[keep])
                    p = permutation_test(means[keep, contrast], severity[keep], n_permutations, seed)
                except DataError as e:
                    logger.warning(f"⚠ Scenario {scenario_id}, q={q}, contrast {contrast}: {e}")
                rows.append({
                    "scenario": scenario_id, "quantile": q, "contrast": contrast,
                    "n": int(keep.sum()), "rho": rho, "p_value": p,
                })
    return pd.DataFrame(rows, columns=["scenario", "quantile", "contrast", "n", "rho", "p_value"])


# ============================================================================
# REPORT
# ============================================================================

@dataclass
class ScenarioReport:
    baseline_auc: float
    curves: pd.DataFrame
    correlations: pd.DataFrame
    rank_quantile: float
    dice: Dict[int, float] = field(default_factory=dict)
    control_dice: Dict[int, float] = field(default_factory=dict)

    @property
    def ranking(self) -> List[Tuple[int, float]]:
        """(scenario, AUC drop) at the rank quantile, largest drop first"""
        at_rank = self.curves[np.isclose(self.curves["quantile"], self.rank_quantile)]
        ordered = at_rank.sort_values(["drop", "scenario"], ascending=[False, True])
        return [(int(r.scenario), float(r.drop)) for r in ordered.itertuples()]

    @property
    def top_scenario(self) -> int:
        return self.ranking[0][0]

    def to_dict(self) -> Dict:
        return {
            "baseline_auc": self.baseline_auc,
            "rank_quantile": self.rank_quantile,
            "ranking": [{"scenario": s, "label": SCENARIOS[s].label, "drop": d} for s, d in self.ranking],
            "dice": {str(k): v for k, v in self.dice.items()},
            "control_dice": {str(k): v for k, v in self.control_dice.items()},
            "correlations": self.correlations.to_dict(orient="records"),
        }

    def to_csv(self, out_dir: Union[str, Path]) -> List[Path]:
        target = Path(out_dir)
        target.mkdir(parents=True, exist_ok=True)
        curves, correlations, summary = target / "curves.csv", target / "correlations.csv", target / "scenarios.json"
        self.curves.to_csv(curves, index=False)
        self.correlations.to_csv(correlations, index=False)
        summary.write_text(json.dumps(self.to_dict(), indent=2, default=float))
        return [curves, correlations, summary]


def run_scenarios(
    samples: Sequence[Sample],
    params: NetworkParams,
    scenario_ids: Optional[Sequence[int]] = None,
    quantiles: Sequence[float] = DEFAULT_QUANTILES,
    truth: Optional[GroundTruth] = None,
    rules: Optional[RuleConfig] = None,
    ig_steps: int = 64,
    rank_quantile: float = RANK_QUANTILE,
    correlation_quantiles: Sequence[float] = CORRELATION_QUANTILES,
    n_permutations: int = 20000,
    seed: int = 0,
    threads: Optional[int] = None,
    maps: Optional[Dict[int, List[np.ndarray]]] = None,
    batch_size: int = 16,
) -> ScenarioReport:
    """
    Inversion curves with random controls, severity correlations and Dice for
    each scenario over one evaluation pool.
    """
    scenarios = resolve_scenarios(scenario_ids)
    if not samples:
        raise DataError("Evaluation pool is empty")
    grid = sorted(set(float(q) for q in quantiles) | {float(rank_quantile)})
    maps = maps if maps is not None else compute_scenario_maps(samples, params, scenarios, rules, ig_steps, threads)
    baseline = _pool_auc(samples, params, batch_size)

    rows = []
    dice_scores, control_scores = {}, {}
    for scenario in scenarios:
        scenario_maps = maps[scenario.id]
        curve = inversion_curve(samples, params, scenario_maps, grid, scenario.id, batch_size)
        control = random_control_curve(samples, params, scenario_maps, grid, seed, batch_size)
        for q, value, reference in zip(grid, curve, control):
            rows.append({
                "scenario": scenario.id, "quantile": q, "auc": value, "control_auc": reference,
                "drop": baseline - value, "control_drop": baseline - reference,
            })
        if truth is not None:
            dice_scores[scenario.id], control_scores[scenario.id] = localization_dice(
                samples, scenario_maps, truth, rank_quantile, seed
            )
        logger.info(f"✓ {scenario.label}: AUC {curve[grid.index(rank_quantile)]:.3f} at q={rank_quantile}")

    curves = pd.DataFrame(rows, columns=["scenario", "quantile", "auc", "control_auc", "drop", "control_drop"])
    correlations = correlation_table(
        samples, {s.id: maps[s.id] for s in scenarios}, correlation_quantiles, n_permutations, seed
    )
    report = ScenarioReport(
        baseline_auc=baseline, curves=curves, correlations=correlations, rank_quantile=rank_quantile,
        dice=dice_scores, control_dice=control_scores,
    )
    logger.info(f"✓ Largest AUC drop at q={rank_quantile}: scenario {report.top_scenario}")
    return report


# ============================================================================
# MONTAGES
# ============================================================================

def write_pgm_montage(volume: np.ndarray, masks: Sequence[np.ndarray], path: Union[str, Path]) -> Path:
    """
    Binary PGM (P5) of the mid-axial slice followed by one overlay panel per
    mask (mask voxels white over the dimmed image).
    """
    image = np.asarray(volume, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"Montage needs a (D, H, W) volume, got shape {image.shape}")
    middle = image.shape[0] // 2
    base = np.clip(image[middle], 0.0, 1.0)
    panels = [base]
    for mask in masks:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != image.shape:
            raise ShapeError(f"Mask {mask.shape} does not match volume {image.shape}")
        panels.append(np.where(mask[middle], 1.0, 0.5 * base))
    montage = np.round(np.concatenate(panels, axis=1) * 255).astype(np.uint8)
    height, width = montage.shape
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + montage.tobytes())
    return target
