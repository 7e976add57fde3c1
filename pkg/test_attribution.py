"""Tests for canonization, redistribution rules, relevance passes and gradient baselines"""

import numpy as np
import pytest
from pydantic import ValidationError

import attribution as lrp
import gamer_net as gn
import tensorcore as tc
from errors import ConfigError, DataError, NumericError, ShapeError

ALPHA_BETA_EVERYWHERE = lrp.RuleConfig(input_rule="alphabeta", conv_rule="alphabeta", fc_rule="alphabeta")


def randomize_normalization(params, rng, negative_scales=False):
    for name in [n for n in params.buffers if n.endswith(".running_mean")]:
        stem = name[: -len(".running_mean")]
        shape = params.buffers[name].shape
        params.buffers[name] = rng.normal(0.0, 0.2, shape).astype(np.float32)
        params.buffers[f"{stem}.running_var"] = rng.uniform(0.5, 1.5, shape).astype(np.float32)
        gamma = rng.uniform(0.5, 1.5, shape)
        if negative_scales:
            gamma *= rng.choice([-1.0, 1.0], shape)
        params.tensors[f"{stem}.gamma"] = gamma.astype(np.float32)
        params.tensors[f"{stem}.beta"] = rng.normal(0.0, 0.2, shape).astype(np.float32)
    for name in [n for n in params.tensors if n.endswith(".bias")]:
        params.tensors[name] = rng.normal(0.0, 0.1, params.tensors[name].shape).astype(np.float32)
    return params


# ============================================================================
# RULES
# ============================================================================

def test_rule_config_defaults_and_validation():
    rules = lrp.RuleConfig()
    assert (rules.epsilon, rules.alpha, rules.beta, rules.low, rules.high) == (1e-8, 1.0, 0.0, 0.0, 1.0)
    assert rules.variant == "proposed"
    with pytest.raises(ValidationError):
        lrp.RuleConfig(alpha=2.0, beta=0.0)
    with pytest.raises(ValidationError):
        lrp.RuleConfig(low=1.0, high=0.0)


def test_alpha_beta_on_positive_layer_conserves():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.1, 1.0, size=(1, 5))
    weight = rng.uniform(0.1, 1.0, size=(3, 5))
    relevance = x @ weight.T
    out = lrp.alpha_beta_rule(x, lrp.dense_op(weight), relevance, 1.0, 0.0, 1e-8)
    assert out.sum() == pytest.approx(relevance.sum(), rel=1e-7)
    assert np.all(out >= 0)


def test_epsilon_rule_on_hand_computed_two_layer_net():
    eps = 1e-8
    x = np.array([[1.0, 2.0]])
    w1 = np.array([[1.0, -1.0], [2.0, 1.0]])
    w2 = np.array([[0.5, 1.0]])
    hidden = np.maximum(x @ w1.T, 0)          # [0, 4]
    logit = hidden @ w2.T                     # [4]
    r_hidden = lrp.epsilon_rule(hidden, lrp.dense_op(w2), logit, eps)
    r_input = lrp.epsilon_rule(x, lrp.dense_op(w1), r_hidden, eps)

    expected_hidden = np.array([[0.0, 4.0 * 1.0 * 4.0 / (4.0 + eps)]])
    ratio = np.array([0.0, expected_hidden[0, 1] / (4.0 + eps)])
    expected_input = x * (ratio @ w1)
    np.testing.assert_allclose(r_hidden, expected_hidden, atol=1e-9)
    np.testing.assert_allclose(r_input, expected_input, atol=1e-9)
    np.testing.assert_allclose(r_input, [[2.0, 2.0]], atol=1e-7)


def test_zbox_conserves_inside_the_box():
    rng = np.random.default_rng(1)
    x = rng.uniform(0.0, 1.0, size=(1, 6))
    weight = rng.normal(size=(2, 6))
    relevance = np.array([[0.7, -0.3]])
    box = lrp.zbox_rule(x, lrp.dense_op(weight), relevance, 0.0, 1.0, 1e-8)
    w_neg = np.clip(weight, None, 0)
    z = x @ weight.T - np.ones_like(x) @ w_neg.T
    assert box.sum() == pytest.approx(relevance.sum(), rel=1e-6)
    assert np.all(z > 0)


def test_apply_rule_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        lrp.apply_rule("gamma", np.ones((1, 2)), lrp.dense_op(np.ones((1, 2))), np.ones((1, 1)), lrp.RuleConfig())


# ============================================================================
# MULTIPLICATIVE SPLIT
# ============================================================================

@pytest.mark.parametrize("variant", ["proposed", "lrp-all"])
def test_split_conserves_elementwise(variant):
    rng = np.random.default_rng(2)
    s, g, r = rng.normal(size=(3, 10_000))
    r_s, r_g = lrp.split_multiplicative(s, g, r, variant)
    np.testing.assert_allclose(r_s + r_g, r, atol=1e-9)


def test_proposed_split_follows_magnitudes():
    r_s, r_g = lrp.split_multiplicative(np.array([0.5, -0.3]), np.array([0.5, 0.9]), np.array([1.0, 2.0]))
    np.testing.assert_allclose(r_s, [0.5, 0.5])
    np.testing.assert_allclose(r_g, [0.5, 1.5])


def test_lrp_all_gives_everything_to_the_signal():
    r_s, r_g = lrp.split_multiplicative(np.array([0.1]), np.array([0.9]), np.array([3.0]), "lrp-all")
    assert r_s[0] == 3.0 and r_g[0] == 0.0


def test_degenerate_split_takes_halves():
    r_s, r_g = lrp.split_multiplicative(np.zeros(2), np.array([0.0, 1e-14]), np.array([2.0, 4.0]))
    np.testing.assert_allclose(r_s, [1.0, 2.0])
    np.testing.assert_allclose(r_g, [1.0, 2.0])


def test_split_rejects_bad_inputs():
    with pytest.raises(ShapeError):
        lrp.split_multiplicative(np.ones(2), np.ones(3), np.ones(2))
    with pytest.raises(ConfigError):
        lrp.split_multiplicative(np.ones(2), np.ones(2), np.ones(2), "halves")


# ============================================================================
# CANONIZATION
# ============================================================================

def test_canonized_network_matches_original(micro_params):
    rng = np.random.default_rng(3)
    params = randomize_normalization(micro_params, rng, negative_scales=True)
    canonical = lrp.canonize(params)
    assert canonical.canonical
    assert not any(layer.kind == "bn" for path in canonical.plan for layer in gn._walk(path))
    batch = rng.uniform(size=(6, 3, 8, 8, 8))
    ages = list(rng.uniform(20, 80, 6))
    with tc.precision("f64"):
        raw = gn.forward_batch(batch, ages, params).logits.data
        folded = gn.forward_batch(batch, ages, canonical).logits.data
    assert np.max(np.abs(raw - folded)) <= 1e-5


def test_single_conv_bn_fold_is_exact():
    spec = gn.micro_spec(paths=1)
    params = randomize_normalization(gn.build(spec, 0), np.random.default_rng(4))
    canonical = lrp.canonize(params)
    x = np.random.default_rng(5).uniform(size=(1, 1, 8, 8, 8))
    with tc.precision("f64"):
        record_raw, record_folded = [{}], [{}]
        gn.forward_batch(x, [50.0], params, records=record_raw)
        gn.forward_batch(x, [50.0], canonical, records=record_folded)
    np.testing.assert_allclose(record_folded[0]["p0.stem.conv"], record_raw[0]["p0.stem.bn"], atol=1e-6)


def test_canonize_is_idempotent(micro_params):
    canonical = lrp.canonize(micro_params)
    assert lrp.canonize(canonical) is canonical


def test_canonize_rejects_non_positive_variance(micro_params):
    params = micro_params.copy()
    params.buffers["p0.stem.bn.running_var"][:] = 0.0
    with pytest.raises(NumericError):
        lrp.canonize(params)


# ============================================================================
# RELEVANCE PASSES
# ============================================================================

@pytest.mark.parametrize("variant", ["proposed", "lrp-all"])
def test_logit_relevance_is_conserved(make_sample, variant):
    rules = ALPHA_BETA_EVERYWHERE.model_copy(update={"variant": variant})
    params = gn.build(gn.micro_spec(), seed=0)
    flipped = params.copy()
    flipped.tensors["classifier.weight"] = -flipped.tensors["classifier.weight"]
    for index in range(100):
        sample = make_sample(index=index)
        _, logit, trace = gn.forward(sample, params)
        chosen = params
        if logit < 0:
            chosen = flipped
            _, logit, trace = gn.forward(sample, flipped)
        assert logit > 0
        bundle = lrp.lrp_backward(trace, chosen, "logit", rules)
        total = bundle.maps.sum() + bundle.age_relevance
        assert abs(total - bundle.anchor_value) / bundle.anchor_value <= 1e-3
        assert bundle.anchor_value == pytest.approx(logit, abs=1e-5)


def test_attention_relevance_is_conserved_and_confined_to_its_path(micro_params, make_sample):
    _, _, trace = gn.forward(make_sample(), micro_params)
    bundle = lrp.lrp_backward(trace, micro_params, "attention", path=1)
    assert bundle.anchor_value == pytest.approx(trace.attention[1], rel=1e-4)
    assert np.all(bundle.maps[0] == 0) and np.all(bundle.maps[2] == 0)
    assert abs(bundle.residual) <= 1e-3 * bundle.anchor_value
    assert bundle.age_relevance == 0.0


def test_relevance_agrees_on_raw_and_canonical_params(micro_params, make_sample):
    params = randomize_normalization(micro_params, np.random.default_rng(6))
    canonical = lrp.canonize(params)
    sample = make_sample()
    _, _, raw_trace = gn.forward(sample, params)
    _, _, folded_trace = gn.forward(sample, canonical)
    raw = lrp.lrp_backward(raw_trace, params, "logit")
    folded = lrp.lrp_backward(folded_trace, canonical, "logit")
    assert np.max(np.abs(raw.maps - folded.maps)) <= 1e-5


def test_explain_attention_covers_every_path(micro_params, make_sample):
    sample = make_sample()
    bundle = lrp.explain(sample, micro_params, "attention")
    assert bundle.maps.shape == (3, 8, 8, 8)
    assert bundle.anchor_value == pytest.approx(1.0, abs=1e-5)
    assert all(np.any(bundle.maps[path] != 0) for path in range(3))


def test_combined_map_weights_relevance_by_image(micro_params, make_sample):
    sample = make_sample()
    bundle = lrp.explain(sample, micro_params, "logit")
    combined = lrp.combined_map(bundle, sample)
    np.testing.assert_allclose(combined, (bundle.maps * sample.volumes).sum(axis=0))
    assert bundle.combined is combined
    with pytest.raises(ShapeError):
        lrp.combined_map(bundle, make_sample(paths=2))


def test_sidecar_reports_the_ledger(micro_params, make_sample):
    bundle = lrp.explain(make_sample(), micro_params, "logit")
    sidecar = bundle.sidecar()
    assert sidecar["anchor"] == "logit"
    assert sidecar["conservation_residual"] == pytest.approx(bundle.residual)
    assert sidecar["rules"]["epsilon"] == 1e-8


def test_scaling_the_classifier_scales_logit_relevance(micro_params, make_sample):
    canonical = lrp.canonize(randomize_normalization(micro_params, np.random.default_rng(9)))
    scaled = canonical.copy()
    c = 3.0
    for name in ("classifier.weight", "classifier.bias"):
        scaled.tensors[name] = scaled.tensors[name] * np.float32(c)
    sample = make_sample()
    base = lrp.explain(sample, canonical, "logit")
    bigger = lrp.explain(sample, scaled, "logit")
    assert bigger.anchor_value == pytest.approx(c * base.anchor_value, rel=1e-5)
    np.testing.assert_allclose(bigger.maps, c * base.maps, rtol=1e-5, atol=1e-7 * np.abs(base.maps).max())
    assert bigger.age_relevance == pytest.approx(c * base.age_relevance, rel=1e-5, abs=1e-9)
    attention = lrp.explain(sample, canonical, "attention")
    unchanged = lrp.explain(sample, scaled, "attention")
    np.testing.assert_allclose(unchanged.maps, attention.maps, rtol=0, atol=1e-12)


def test_zero_input_stays_finite_under_zbox(micro_params, make_sample):
    params = randomize_normalization(micro_params, np.random.default_rng(10))
    sample = make_sample()
    sample.volumes = np.zeros_like(sample.volumes)
    rules = lrp.RuleConfig(input_rule="zbox", low=0.0, high=1.0)
    for anchor in ("logit", "attention"):
        bundle = lrp.explain(sample, params, anchor, rules)
        assert np.all(np.isfinite(bundle.maps))
        assert np.isfinite(bundle.sidecar()["conservation_residual"])


def test_relevance_pass_rejects_foreign_traces_and_bad_anchors(micro_params, make_sample):
    _, _, trace = gn.forward(make_sample(), micro_params)
    other = gn.build(micro_params.spec, seed=99)
    with pytest.raises(DataError):
        lrp.lrp_backward(trace, other)
    with pytest.raises(ConfigError):
        lrp.lrp_backward(trace, micro_params, "attention")
    with pytest.raises(ConfigError):
        lrp.lrp_backward(trace, micro_params, "attention", path=3)
    with pytest.raises(ConfigError):
        lrp.lrp_backward(trace, micro_params, "gate")


# ============================================================================
# GRADIENT BASELINES
# ============================================================================

def test_gradient_map_of_linear_function_is_its_weights():
    weights = np.random.default_rng(7).normal(size=(2, 3))
    with tc.precision("f64"):
        grad = lrp.gradient_map(lambda x: tc.total(x * weights, axis=(1, 2)), np.ones((2, 3)))
    np.testing.assert_allclose(grad, weights)


def test_saliency_matches_finite_difference_magnitudes(micro_params, make_sample):
    sample = make_sample()
    sal = lrp.saliency(sample, micro_params, "logit")
    assert sal.shape == sample.volumes.shape and np.all(sal >= 0)
    volumes = sample.volumes.astype(np.float64)
    h = 1e-5
    rng = np.random.default_rng(8)
    with tc.precision("f64"):
        for flat in rng.choice(volumes.size, 10, replace=False):
            shifted = volumes.copy()
            shifted.flat[flat] += h
            plus = gn.forward_batch(shifted[None], [sample.age], micro_params).logits.data[0]
            shifted.flat[flat] -= 2 * h
            minus = gn.forward_batch(shifted[None], [sample.age], micro_params).logits.data[0]
            central = abs((plus - minus) / (2 * h))
            assert abs(sal.flat[flat] - central) <= 1e-4 * max(central, 1e-4)


def test_attention_saliency_fills_each_path(micro_params, make_sample):
    maps = lrp.saliency(make_sample(), micro_params, "attention")
    assert maps.shape == (3, 8, 8, 8)
    assert all(np.any(maps[path] > 0) for path in range(3))


def test_integrated_gradients_completeness(micro_params, make_sample):
    sample = make_sample()
    attributions = lrp.integrated_gradients(sample, micro_params, "logit", steps=256)
    with tc.precision("f64"):
        at_input = gn.forward_batch(sample.volumes[None].astype(np.float64), [sample.age], micro_params).logits.data[0]
        at_base = gn.forward_batch(np.zeros((1, 3, 8, 8, 8)), [sample.age], micro_params).logits.data[0]
    gap = at_input - at_base
    assert abs(attributions.sum() - gap) / abs(gap) <= 1e-3


def test_integrated_gradients_validates_arguments(micro_params, make_sample):
    sample = make_sample()
    with pytest.raises(ConfigError):
        lrp.integrated_gradients(sample, micro_params, steps=0)
    with pytest.raises(ShapeError):
        lrp.integrated_gradients(sample, micro_params, steps=2, baseline=np.zeros((3, 4, 4, 4)))
    with pytest.raises(ConfigError):
        lrp.saliency(sample, micro_params, "gate")
