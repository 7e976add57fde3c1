"""Tests for the training pipeline: loss, metrics, augmentation, optimizer, splits and folds"""

import json
import logging
import math

import numpy as np
import pandas as pd
import pytest

import gamer_net as gn
import trainer
from errors import DataError, NumericError, ShapeError
from trainer import AdamWState, AugmentConfig, Sample, TrainConfig


def tiny_sample(subject, severity, timepoint=0, value=0.5):
    return Sample(
        volumes=np.full((1, 2, 2, 2), value),
        brain_mask=np.ones((2, 2, 2), dtype=bool),
        age=50.0,
        severity=severity,
        label=int(severity >= 5),
        subject_id=subject,
        timepoint=timepoint,
    )


def tiny_cohort(n_severe, n_mild, followups=()):
    samples = [tiny_sample(f"sev-{i:02d}", 7.0) for i in range(n_severe)]
    samples += [tiny_sample(f"mild-{i:02d}", 2.0) for i in range(n_mild)]
    samples += [tiny_sample(subject, 7.5 if subject.startswith("sev") else 2.5, timepoint=1) for subject in followups]
    return samples


# ============================================================================
# SAMPLE
# ============================================================================

def test_sample_validates_its_fields():
    with pytest.raises(DataError, match="inconsistent"):
        Sample(np.zeros((1, 2, 2, 2)), np.ones((2, 2, 2)), 40.0, 6.0, 0, "s")
    with pytest.raises(DataError, match=r"\[0, 1\]"):
        Sample(np.full((1, 2, 2, 2), 1.5), np.ones((2, 2, 2)), 40.0, 1.0, 0, "s")
    with pytest.raises(ShapeError):
        Sample(np.zeros((1, 2, 2, 2)), np.ones((3, 3, 3)), 40.0, 1.0, 0, "s")
    with pytest.raises(DataError):
        Sample(np.zeros((1, 2, 2, 2)), np.ones((2, 2, 2)), 40.0, 11.0, 1, "s")
    assert tiny_sample("sub-007", 2.0, timepoint=1).key == "sub-007_t1"


# ============================================================================
# LOSS AND METRICS
# ============================================================================

@pytest.mark.parametrize("severity, weight", [(5.0, 2.0), (0.0, 1.0), (10.0, 1.0), (7.5, 1.5), (2.5, 1.5)])
def test_sample_weight_values(severity, weight):
    assert trainer.sample_weight(severity) == pytest.approx(weight)


def test_sample_weight_rejects_out_of_range():
    for severity in (-0.5, 10.5):
        with pytest.raises(DataError):
            trainer.sample_weight(severity)


def test_weighted_bce_values():
    assert trainer.weighted_bce(0.5, 0) == pytest.approx(math.log(2))
    assert trainer.weighted_bce(0.5, 1) == pytest.approx(0.6931, abs=1e-4)
    assert trainer.weighted_bce(0.9, 1, 2.0) == pytest.approx(0.21072, abs=1e-5)
    assert trainer.weighted_bce(0.999999, 1) < 1e-5


def test_weighted_bce_clamps_and_flags(caplog):
    with caplog.at_level(logging.WARNING, logger="trainer"):
        loss = trainer.weighted_bce(1.0, 0)
    assert loss == pytest.approx(-math.log(trainer.PROBABILITY_CLAMP), rel=1e-6)
    assert "clamped" in caplog.text


def brute_force_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (greater + 0.5 * ties) / (pos.size * neg.size)


def test_auc_matches_pairwise_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 6, n).astype(float)
        assert trainer.auc(scores, labels) == brute_force_auc(scores, labels)


def test_auc_edge_cases():
    assert trainer.auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert trainer.auc([0.4] * 6, [0, 1, 0, 1, 0, 1]) == 0.5
    with pytest.raises(DataError):
        trainer.auc([0.1, 0.2], [1, 1])


def test_auc_is_invariant_under_monotone_transforms():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=50)
    labels = rng.integers(0, 2, 50)
    assert trainer.auc(np.exp(scores), labels) == trainer.auc(scores, labels)
    assert trainer.auc(3 * scores - 1, labels) == trainer.auc(scores, labels)


def test_classification_metrics():
    metrics = trainer.classification_metrics([0.9, 0.6, 0.4, 0.2, 0.7], [1, 1, 1, 0, 0])
    assert metrics.accuracy == pytest.approx(3 / 5)
    assert metrics.sensitivity == pytest.approx(2 / 3)
    assert metrics.specificity == pytest.approx(1 / 2)
    assert metrics.count == 5
    assert np.isnan(trainer.classification_metrics([0.3, 0.8], [1, 1]).auc)


# ============================================================================
# AUGMENTATION AND SAMPLING
# ============================================================================

def test_disabled_augmentation_is_identity(make_sample, rng):
    sample = make_sample()
    out = trainer.augment(sample, rng, AugmentConfig.disabled())
    np.testing.assert_array_equal(out.volumes, sample.volumes)
    np.testing.assert_array_equal(out.brain_mask, sample.brain_mask)


def test_augmentation_is_deterministic_per_seed(make_sample):
    sample = make_sample()
    first = trainer.augment(sample, np.random.default_rng(5), AugmentConfig(probability=1.0))
    second = trainer.augment(sample, np.random.default_rng(5), AugmentConfig(probability=1.0))
    np.testing.assert_array_equal(first.volumes, second.volumes)
    assert first.volumes.min() >= 0 and first.volumes.max() <= 1


def test_flips_and_rotations_preserve_voxel_multisets(make_sample):
    sample = make_sample()
    config = AugmentConfig(affine=False, noise=False, probability=1.0)
    for seed in range(5):
        out = trainer.augment(sample, np.random.default_rng(seed), config)
        for path in range(3):
            np.testing.assert_array_equal(np.sort(out.volumes[path], axis=None), np.sort(sample.volumes[path], axis=None))
        assert out.brain_mask.sum() == sample.brain_mask.sum()


def test_two_quarter_turns_equal_a_half_turn(rng):
    volume = rng.normal(size=(3, 4, 4, 5))
    twice = trainer.rotate90(trainer.rotate90(volume, 1, (1, 2)), 1, (1, 2))
    np.testing.assert_array_equal(twice, trainer.rotate90(volume, 2, (1, 2)))
    np.testing.assert_array_equal(twice, volume[:, ::-1, ::-1, :])
    np.testing.assert_array_equal(trainer.flip(volume, 3), volume[..., ::-1])
    np.testing.assert_array_equal(trainer.flip(trainer.flip(volume, 2), 2), volume)


def test_identity_affine_leaves_volumes_unchanged(make_sample):
    sample = make_sample()
    volumes, mask = trainer.affine_resample(sample.volumes, sample.brain_mask, [0.0, 0.0, 0.0], 1.0)
    np.testing.assert_allclose(volumes, sample.volumes, atol=1e-6)
    np.testing.assert_array_equal(mask, sample.brain_mask)


def test_weighted_sampler_balances_classes():
    labels = [1] * 10 + [0] * 30
    draws = trainer.WeightedSampler(labels, np.random.default_rng(2)).draw(100_000)
    severe_share = np.isin(draws, np.arange(10)).mean()
    assert abs(severe_share - 0.5) <= 0.02


# ============================================================================
# OPTIMIZER
# ============================================================================

def test_zero_gradient_applies_pure_decay():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    expected = params["w"] * (1 - 5e-7)
    trainer.adamw_step(params, {"w": np.zeros(3)}, AdamWState(), TrainConfig())
    np.testing.assert_allclose(params["w"], expected, rtol=1e-12)


def test_first_adam_step_moves_by_learning_rate():
    params = {"w": np.array([0.3])}
    config = TrainConfig(learning_rate=1e-3, weight_decay=0.0)
    trainer.adamw_step(params, {"w": np.array([1.0])}, AdamWState(), config)
    assert params["w"][0] == pytest.approx(0.3 - 1e-3, rel=1e-9)


def test_adamw_minimizes_a_quadratic():
    params = {"w": np.array([1.0])}
    state = AdamWState()
    config = TrainConfig(learning_rate=1e-2, weight_decay=0.0)
    for _ in range(2000):
        trainer.adamw_step(params, {"w": 2 * params["w"]}, state, config)
    assert abs(params["w"][0]) < 0.1
    assert state.step == 2000


def test_adamw_rejects_bad_gradients_without_side_effects():
    params = {"a": np.array([1.0]), "b": np.array([2.0])}
    state = AdamWState()
    with pytest.raises(NumericError):
        trainer.adamw_step(params, {"a": np.array([0.5]), "b": np.array([np.nan])}, state, TrainConfig())
    assert params["a"][0] == 1.0 and state.step == 0
    with pytest.raises(ShapeError):
        trainer.adamw_step(params, {"a": np.ones(2)}, state, TrainConfig())


# ============================================================================
# SPLITS
# ============================================================================

def test_kfold_stratifies_exactly_when_divisible():
    dataset = tiny_cohort(12, 24)
    labels = {s.subject_id: s.label for s in dataset}
    plan = trainer.stratified_kfold(dataset, 3, seed=0)
    for fold in plan.folds:
        assert sum(labels[s] for s in fold) == 4
        assert len(fold) == 12
    members = [s for fold in plan.folds for s in fold]
    assert len(members) == len(set(members)) == 36


def test_kfold_keeps_timepoints_together_and_holds_out_test():
    dataset = tiny_cohort(9, 15, followups=["sev-00", "mild-03", "mild-10"])
    plan = trainer.stratified_kfold(dataset, 3, seed=4, test_fraction=0.2)
    assert len(plan.test) == round(0.2 * 9) + round(0.2 * 15)
    members = [s for fold in plan.folds for s in fold] + plan.test
    assert sorted(members) == sorted({s.subject_id for s in dataset})
    assert trainer.stratified_kfold(dataset, 3, seed=4, test_fraction=0.2) == plan


def test_kfold_rejects_small_classes():
    with pytest.raises(DataError):
        trainer.stratified_kfold(tiny_cohort(2, 10), 3, seed=0)


# ============================================================================
# TRAINING
# ============================================================================

QUICK = TrainConfig(epochs=1, batch_size=4, eval_batch_size=8, learning_rate=1e-3,
                    augment=AugmentConfig.disabled())


def test_train_fold_records_every_epoch(cohort):
    result = trainer.train_fold(cohort[::2], cohort[1::2], gn.micro_spec(), QUICK, seed=1)
    assert [row["epoch"] for row in result.history] == [0, 1]
    assert result.status == "ok"
    assert result.best_epoch in (0, 1)
    assert len(result.attention_means) == 3
    assert result.validation_keys == [s.key for s in cohort[1::2]]


def test_train_fold_is_reproducible(cohort):
    first = trainer.train_fold(cohort[::2], cohort[1::2], gn.micro_spec(), QUICK, seed=2)
    second = trainer.train_fold(cohort[::2], cohort[1::2], gn.micro_spec(), QUICK, seed=2)
    assert first.history == second.history
    assert first.params.fingerprint() == second.params.fingerprint()


def test_divergence_aborts_the_fold(cohort, monkeypatch):
    def explode(*args, **kwargs):
        raise NumericError("Non-finite gradient for 'classifier.weight'; step rejected")

    monkeypatch.setattr(trainer, "adamw_step", explode)
    result = trainer.train_fold(cohort[::2], cohort[1::2], gn.micro_spec(), QUICK, seed=3)
    assert result.status == "diverged"
    assert "classifier.weight" in result.diagnostics
    assert result.best_epoch == 0
    assert result.params.fingerprint() == gn.build(gn.micro_spec(), 3).fingerprint()


def test_train_cv_without_epochs_reports_the_untrained_model(cohort, tmp_path):
    config = QUICK.model_copy(update={"epochs": 0, "folds": 2, "test_fraction": 0.0})
    result = trainer.train_cv(cohort, gn.micro_spec(), config)
    assert len(result.folds) == 2
    frame = result.to_frame()
    assert list(frame.columns) == ["fold", "epoch", "loss", "auc", "acc", "sens", "spec"]
    assert (frame["epoch"] == 0).all()
    best = max(fold.validation.auc for fold in result.folds)
    assert result.selected.validation.auc == best

    pool = result.evaluation_pool(cohort)
    assert {s.key for s in pool} == set(result.selected.validation_keys)

    metrics_path, summary_path = result.write(tmp_path)
    assert len(pd.read_csv(metrics_path)) == 2
    summary = json.loads(summary_path.read_text())
    assert summary["selected_fold"] == result.selected_fold
    assert len(summary["folds"][0]["attention_means"]) == 3
