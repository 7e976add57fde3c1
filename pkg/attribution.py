"""
Relevance engine

Provides:
- RuleConfig: epsilon / alpha-beta / z-box parameters and the multiplicative split variant
- canonize(): fold BN into adjacent convolutions and fully connected layers
- split_multiplicative(): proposed absolute-value split or the all-to-signal split
- lrp_backward(): relevance from the logit or from one attention weight back to the voxels
- combined_map(): sum over contrasts of relevance times image
- saliency() / integrated_gradients(): gradient baselines

Rule mixture: the input convolution uses the z-box rule, other convolutions the
alpha-beta rule, fully connected layers the epsilon rule. Biases never enter a
relevance denominator, so redistribution conserves the anchor value.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import tensorcore as tc
from errors import ConfigError, DataError, NumericError, ShapeError
from gamer_net import ForwardTrace, LayerDef, NetworkParams, forward, forward_batch
from tensorcore import Tensor

if TYPE_CHECKING:
    from trainer import Sample

logger = logging.getLogger(__name__)

_bypass_logged = False


class RuleConfig(BaseModel):
    """Redistribution rule parameters"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    epsilon: float = Field(1e-8, gt=0)
    alpha: float = 1.0
    beta: float = Field(0.0, ge=0)
    low: float = 0.0
    high: float = 1.0
    variant: Literal["proposed", "lrp-all"] = "proposed"
    delta: float = Field(1e-12, gt=0, description="Degenerate-split guard for |s| + |g|")
    input_rule: Literal["zbox", "alphabeta", "epsilon"] = "zbox"
    conv_rule: Literal["alphabeta", "epsilon"] = "alphabeta"
    fc_rule: Literal["epsilon", "alphabeta"] = "epsilon"

    @model_validator(mode="after")
    def _check_bounds(self) -> "RuleConfig":
        if abs(self.alpha - self.beta - 1.0) > 1e-12:
            raise ValueError(f"alpha - beta must equal 1, got alpha={self.alpha}, beta={self.beta}")
        if not self.low < self.high:
            raise ValueError(f"z-box bounds need low < high, got ({self.low}, {self.high})")
        return self


@dataclass
class RelevanceBundle:
    """Per-contrast relevance maps plus the age ledger"""
    maps: np.ndarray                     # (L, D, H, W)
    age_relevance: float
    anchor: str                          # "logit" | "attention"
    anchor_value: float
    variant: str
    anchor_path: Optional[int] = None
    combined: Optional[np.ndarray] = None
    rules: Dict[str, object] = field(default_factory=dict)

    @property
    def residual(self) -> float:
        """anchor value minus everything redistributed to voxels and age"""
        return float(self.anchor_value - (self.maps.sum() + self.age_relevance))

    def sidecar(self) -> Dict[str, object]:
        return {
            "anchor": self.anchor,
            "anchor_path": self.anchor_path,
            "anchor_value": self.anchor_value,
            "variant": self.variant,
            "age_relevance": self.age_relevance,
            "conservation_residual": self.residual,
            "rules": self.rules,
        }


# ============================================================================
# CANONIZATION
# ============================================================================

def _bn_affine(params: NetworkParams, name: str) -> Tuple[np.ndarray, np.ndarray]:
    """BN(x) = a * x + c per channel"""
    var = params.buffers[f"{name}.running_var"].astype(np.float64)
    if np.any(var <= 0):
        raise NumericError(f"BatchNorm '{name}' has non-positive running variance: min {var.min()}")
    mean = params.buffers[f"{name}.running_mean"].astype(np.float64)
    gamma = params.tensors[f"{name}.gamma"].astype(np.float64)
    beta = params.tensors[f"{name}.beta"].astype(np.float64)
    a = gamma / np.sqrt(var + params.spec.bn_eps)
    return a, beta - a * mean


def _canonize_layers(
    layers: Sequence[LayerDef],
    params: NetworkParams,
    tensors: Dict[str, np.ndarray],
    buffers: Dict[str, np.ndarray],
) -> List[LayerDef]:
    out: List[LayerDef] = []
    pending_scale: Optional[np.ndarray] = None
    drop_relu = False
    for index, layer in enumerate(layers):
        if layer.kind == "dense":
            children = _canonize_layers(layer.children, params, tensors, buffers)
            out.append(replace(layer, children=tuple(children)))
        elif layer.kind == "bn":
            a, c = _bn_affine(params, layer.name)
            previous = out[-1] if out else None
            if previous is not None and previous.kind in ("conv", "fc"):
                # Conv -> BN: W' = a W, b' = a b + c
                weight, bias = f"{previous.name}.weight", f"{previous.name}.bias"
                shape = (-1,) + (1,) * (tensors[weight].ndim - 1)
                tensors[weight] = tensors[weight] * a.reshape(shape)
                tensors[bias] = a * tensors[bias] + c
                continue
            following = layers[index + 1] if index + 1 < len(layers) else None
            if following is None or following.kind != "relu":
                raise ConfigError(f"Cannot canonize BatchNorm '{layer.name}': not followed by ReLU")
            if np.any(a == 0):
                raise NumericError(f"BatchNorm '{layer.name}' has zero scale; cannot fold into a threshold ReLU")
            # BN -> ReLU -> linear: ReLU(a x + c) = |a| ReLU(sign(a) x + c / |a|)
            buffers[f"{layer.name}.sign"] = np.sign(a)
            buffers[f"{layer.name}.shift"] = c / np.abs(a)
            out.append(LayerDef(layer.name, "trelu", {"channels": layer.options["channels"]}))
            pending_scale = np.abs(a)
            drop_relu = True
        elif layer.kind == "relu" and drop_relu:
            drop_relu = False
        elif layer.kind in ("conv", "fc"):
            weight, bias = f"{layer.name}.weight", f"{layer.name}.bias"
            tensors[weight] = params.tensors[weight].astype(np.float64)
            tensors[bias] = params.tensors[bias].astype(np.float64)
            if pending_scale is not None:
                if layer.kind == "conv":
                    tensors[weight] = tensors[weight] * pending_scale[None, :, None, None, None]
                else:
                    rows = tensors[weight].shape[0]
                    blocks = tensors[weight].reshape(rows, pending_scale.shape[0], -1)
                    tensors[weight] = (blocks * pending_scale[None, :, None]).reshape(rows, -1)
                pending_scale = None
            out.append(layer)
        else:
            out.append(layer)
    if pending_scale is not None:
        raise ConfigError("BatchNorm scale has no downstream convolution or fully connected layer")
    return out


def canonize(params: NetworkParams) -> NetworkParams:
    """
    Fold every BatchNorm into an adjacent linear layer.

    Conv -> BN merges into the convolution. BN -> ReLU -> Conv/FC becomes a
    per-channel threshold ReLU whose scale moves into the consumer's input
    channels. Canonizing canonical params returns them unchanged.

    Raises:
        NumericError: Non-positive BN variance or zero BN scale
    """
    if params.canonical:
        return params
    tensors: Dict[str, np.ndarray] = {
        name: array.astype(np.float64)
        for name, array in params.tensors.items()
        if name.startswith(("attention.", "classifier."))
    }
    buffers: Dict[str, np.ndarray] = {}
    plan = [_canonize_layers(path, params, tensors, buffers) for path in params.plan]
    logger.debug(f"Canonized network: {len(params.tensors)} -> {len(tensors)} parameter tensors")
    return NetworkParams(spec=params.spec, seed=params.seed, tensors=tensors, buffers=buffers,
                         plan=plan, canonical=True)


# ============================================================================
# REDISTRIBUTION RULES
# ============================================================================

@dataclass
class LinearOp:
    """A bias-free linear map with its weight, forward and adjoint"""
    weight: np.ndarray
    apply: Callable[[np.ndarray, np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray, np.ndarray], np.ndarray]


def dense_op(weight: np.ndarray) -> LinearOp:
    return LinearOp(weight, lambda x, w: x @ w.T, lambda y, w: y @ w)


def conv_op(weight: np.ndarray, input_shape: Tuple[int, ...], stride: int = 1) -> LinearOp:
    return LinearOp(
        weight,
        lambda x, w: tc.conv3d_array(x, w, stride, 0),
        lambda y, w: tc.conv3d_transpose_array(y, w, input_shape, stride, 0),
    )


def _stabilize(z: np.ndarray, eps: float) -> np.ndarray:
    return z + eps * np.where(z >= 0, 1.0, -1.0)


def epsilon_rule(x: np.ndarray, op: LinearOp, relevance: np.ndarray, eps: float) -> np.ndarray:
    z = op.apply(x, op.weight)
    return x * op.adjoint(relevance / _stabilize(z, eps), op.weight)


def alpha_beta_rule(
    x: np.ndarray, op: LinearOp, relevance: np.ndarray, alpha: float, beta: float, eps: float
) -> np.ndarray:
    x_pos, x_neg = np.clip(x, 0, None), np.clip(x, None, 0)
    w_pos, w_neg = np.clip(op.weight, 0, None), np.clip(op.weight, None, 0)
    z_pos = op.apply(x_pos, w_pos) + op.apply(x_neg, w_neg)
    s = relevance / (z_pos + eps)
    result = alpha * (x_pos * op.adjoint(s, w_pos) + x_neg * op.adjoint(s, w_neg))
    if beta:
        z_neg = op.apply(x_pos, w_neg) + op.apply(x_neg, w_pos)
        s = relevance / (z_neg - eps)
        result = result - beta * (x_pos * op.adjoint(s, w_neg) + x_neg * op.adjoint(s, w_pos))
    return result


def zbox_rule(
    x: np.ndarray, op: LinearOp, relevance: np.ndarray, low: float, high: float, eps: float
) -> np.ndarray:
    w_pos, w_neg = np.clip(op.weight, 0, None), np.clip(op.weight, None, 0)
    lo, hi = np.full_like(x, low), np.full_like(x, high)
    z = op.apply(x, op.weight) - op.apply(lo, w_pos) - op.apply(hi, w_neg)
    s = relevance / _stabilize(z, eps)
    return x * op.adjoint(s, op.weight) - lo * op.adjoint(s, w_pos) - hi * op.adjoint(s, w_neg)


def apply_rule(kind: str, x: np.ndarray, op: LinearOp, relevance: np.ndarray, rules: RuleConfig) -> np.ndarray:
    if kind == "epsilon":
        return epsilon_rule(x, op, relevance, rules.epsilon)
    if kind == "alphabeta":
        return alpha_beta_rule(x, op, relevance, rules.alpha, rules.beta, rules.epsilon)
    if kind == "zbox":
        return zbox_rule(x, op, relevance, rules.low, rules.high, rules.epsilon)
    raise ConfigError(f"Unknown rule '{kind}'")


def split_multiplicative(
    s: np.ndarray, g: np.ndarray, relevance: np.ndarray, variant: str = "proposed", delta: float = 1e-12
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Split the relevance of an element-wise product s * g between its operands.

    proposed: R_s = |s| / (|s| + |g|) R, R_g = |g| / (|s| + |g|) R; equal
    halves where |s| + |g| < delta. lrp-all: the signal operand s takes all.
    """
    s, g, r = (np.asarray(v, dtype=np.float64) for v in (s, g, relevance))
    if not (s.shape == g.shape == r.shape):
        raise ShapeError(f"split_multiplicative shapes differ: s {s.shape}, g {g.shape}, R {r.shape}")
    if variant == "lrp-all":
        return r.copy(), np.zeros_like(r)
    if variant != "proposed":
        raise ConfigError(f"Unknown multiplicative variant '{variant}'")
    magnitude = np.abs(s) + np.abs(g)
    degenerate = magnitude < delta
    share = np.where(degenerate, 0.5, np.abs(s) / np.where(degenerate, 1.0, magnitude))
    r_s = share * r
    return r_s, r - r_s


# ============================================================================
# BACKWARD PASS
# ============================================================================

def _check(relevance: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(relevance)):
        raise NumericError(f"Non-finite relevance at layer '{where}'")
    return relevance


def _layer_relevance(
    layer: LayerDef,
    x: np.ndarray,
    record: Dict[str, np.ndarray],
    relevance: np.ndarray,
    params: NetworkParams,
    rules: RuleConfig,
    input_layer: str,
) -> np.ndarray:
    o = layer.options
    if layer.kind == "conv":
        x5 = x[None]
        padded = tc.pad_volume(x5, o["padding"], o["pad_mode"])
        op = conv_op(params.tensors[f"{layer.name}.weight"], padded.shape, o["stride"])
        rule = rules.input_rule if layer.name == input_layer else rules.conv_rule
        r_padded = apply_rule(rule, padded, op, relevance[None], rules)
        return tc.unpad_gradient(r_padded, o["padding"], o["pad_mode"], x5.shape)[0]
    if layer.kind == "fc":
        op = dense_op(params.tensors[f"{layer.name}.weight"])
        return apply_rule(rules.fc_rule, x[None], op, relevance[None], rules)[0]
    if layer.kind in ("relu", "trelu"):
        return relevance
    if layer.kind == "maxpool":
        _, winners = tc.maxpool3d_array(x[None], o["kernel"], o["stride"], o["padding"])
        return tc.maxpool3d_scatter(relevance[None], winners, x[None].shape, o["padding"])[0]
    if layer.kind == "avgpool":
        window_sum = tc.avgpool3d_array(x[None], o["kernel"], o["stride"]) * float(np.prod(tc.triple(o["kernel"])))
        s = relevance[None] / _stabilize(window_sum, rules.epsilon)
        return (x[None] * tc.avgpool3d_spread(s, x[None].shape, o["kernel"], o["stride"]))[0]
    if layer.kind == "dense":
        channels = x.shape[0]
        grown = _layers_relevance(layer.children, x, record, relevance[channels:], params, rules, input_layer)
        return relevance[:channels] + grown
    if layer.kind == "flatten":
        return relevance.reshape(x.shape)
    raise ConfigError(f"Layer '{layer.name}' of kind '{layer.kind}' has no relevance rule; canonize first")


def _layers_relevance(
    layers: Sequence[LayerDef],
    x: np.ndarray,
    record: Dict[str, np.ndarray],
    relevance: np.ndarray,
    params: NetworkParams,
    rules: RuleConfig,
    input_layer: str,
) -> np.ndarray:
    inputs = []
    current = x
    for layer in layers:
        inputs.append(current)
        current = record[layer.name]
    for layer, layer_input in zip(reversed(layers), reversed(inputs)):
        relevance = _check(
            _layer_relevance(layer, layer_input, record, relevance, params, rules, input_layer), layer.name
        )
        logger.debug(f"relevance {layer.name}: sum {relevance.sum():.6g}")
    return relevance


@dataclass
class _Replay:
    volumes: np.ndarray
    records: List[Dict[str, np.ndarray]]
    hidden: np.ndarray
    signal: np.ndarray
    gate: np.ndarray
    attention: np.ndarray
    combined: np.ndarray
    age_feature: float
    logit: float


def _replay(trace: ForwardTrace, canonical: NetworkParams) -> _Replay:
    """Re-run the traced inputs through the canonical network in float64"""
    records: List[Dict[str, np.ndarray]] = [{} for _ in range(canonical.spec.paths)]
    with tc.precision("f64"):
        out = forward_batch(trace.volumes[None].astype(np.float64), [trace.age], canonical, records=records)
    logit = float(out.logits.data[0])
    drift = abs(logit - trace.logit)
    logger.debug(f"Replay logit {logit:.8g} vs traced {trace.logit:.8g} (drift {drift:.2e})")
    return _Replay(
        volumes=trace.volumes.astype(np.float64),
        records=records,
        hidden=np.stack([m.data[0] for m in out.hidden]),
        signal=np.stack([s.data[0] for s in out.heads.signal]),
        gate=np.stack([g.data[0] for g in out.heads.gate]),
        attention=out.attention.data[0],
        combined=out.heads.combined.data[0],
        age_feature=float(out.age_feature[0]),
        logit=logit,
    )


def _attention_branch(path: int, score_relevance: float, replay: _Replay, params: NetworkParams,
                      rules: RuleConfig) -> np.ndarray:
    """Relevance on m_l from the pre-softmax score of path l (w, then s * g split, then U / V)"""
    s, g, m = replay.signal[path], replay.gate[path], replay.hidden[path]
    gated = s * g
    r_gated = apply_rule(rules.fc_rule, gated[None], dense_op(params.tensors["attention.w.weight"]),
                         np.array([[score_relevance]]), rules)[0]
    r_signal, r_gate = split_multiplicative(s, g, r_gated, rules.variant, rules.delta)
    r_from_signal = apply_rule(rules.fc_rule, m[None], dense_op(params.tensors["attention.U.weight"]),
                               r_signal[None], rules)[0]
    r_from_gate = apply_rule(rules.fc_rule, m[None], dense_op(params.tensors["attention.V.weight"]),
                             r_gate[None], rules)[0]
    return _check(r_from_signal + r_from_gate, "attention")


def _encoder_relevance(path: int, hidden_relevance: np.ndarray, replay: _Replay, params: NetworkParams,
                       rules: RuleConfig) -> np.ndarray:
    layers = params.plan[path]
    contrast = replay.volumes[path][None]
    r = _layers_relevance(layers, contrast, replay.records[path], hidden_relevance, params, rules, layers[0].name)
    return r[0]


def _log_bypass_once() -> None:
    global _bypass_logged
    if not _bypass_logged:
        logger.warning(
            "Attention-anchored relevance starts at the pre-softmax score with magnitude a_l; "
            "the softmax is treated as terminal and not propagated through"
        )
        _bypass_logged = True


def lrp_backward(
    trace: ForwardTrace,
    params: NetworkParams,
    anchor: str = "logit",
    rules: Optional[RuleConfig] = None,
    path: Optional[int] = None,
) -> RelevanceBundle:
    """
    Redistribute an anchor value back onto the input voxels.

    Args:
        trace: ForwardTrace produced by params
        params: Network parameters; canonized on the fly when not canonical
        anchor: "logit" starts at f(x); "attention" starts at a_path on path's score
        rules: Rule configuration (defaults to RuleConfig())
        path: Path index for the attention anchor

    Returns:
        RelevanceBundle with one map per contrast; the attention anchor fills only
        the map of its own path

    Raises:
        DataError: Trace was not produced by params
        ConfigError: Unknown anchor or missing/invalid path
        NumericError: Non-finite relevance (message names the layer)
    """
    rules = rules or RuleConfig()
    if trace.params_fingerprint != params.fingerprint():
        raise DataError("Trace/params mismatch: the trace was produced by different parameters")
    canonical = canonize(params)
    replay = _replay(trace, canonical)
    paths = canonical.spec.paths
    maps = np.zeros(replay.volumes.shape, dtype=np.float64)
    m_dim = replay.hidden.shape[1]

    if anchor == "logit":
        anchor_value = replay.logit
        features = np.concatenate([replay.combined, [replay.age_feature]])
        r_features = apply_rule(rules.fc_rule, features[None], dense_op(canonical.tensors["classifier.weight"]),
                                np.array([[anchor_value]]), rules)[0]
        age_relevance = float(r_features[m_dim])
        r_combined = r_features[:m_dim]
        # n = sum_l a_l m_l: proportional split over paths, then each product a_l * m_l
        products = replay.attention[:, None] * replay.hidden
        r_products = products * (r_combined / _stabilize(products.sum(axis=0), rules.epsilon))[None]
        for index in range(paths):
            weight = np.full(m_dim, replay.attention[index])
            r_hidden, r_weight = split_multiplicative(
                replay.hidden[index], weight, r_products[index], rules.variant, rules.delta
            )
            r_hidden = r_hidden + _attention_branch(index, float(r_weight.sum()), replay, canonical, rules)
            maps[index] = _encoder_relevance(index, r_hidden, replay, canonical, rules)
        anchor_path = None
    elif anchor == "attention":
        if path is None or not 0 <= path < paths:
            raise ConfigError(f"Attention anchor needs a path index in [0, {paths}), got {path}")
        _log_bypass_once()
        anchor_value = float(replay.attention[path])
        r_hidden = _attention_branch(path, anchor_value, replay, canonical, rules)
        maps[path] = _encoder_relevance(path, r_hidden, replay, canonical, rules)
        age_relevance = 0.0
        anchor_path = path
    else:
        raise ConfigError(f"Unknown anchor '{anchor}', expected 'logit' or 'attention'")

    bundle = RelevanceBundle(
        maps=_check(maps, "input"),
        age_relevance=age_relevance,
        anchor=anchor,
        anchor_value=anchor_value,
        variant=rules.variant,
        anchor_path=anchor_path,
        rules=rules.model_dump(),
    )
    logger.debug(f"LRP {anchor} pass: anchor {anchor_value:.6g}, residual {bundle.residual:.3e}")
    return bundle


def lrp_attention_maps(trace: ForwardTrace, params: NetworkParams, rules: Optional[RuleConfig] = None) -> RelevanceBundle:
    """One attention-anchored pass per path; map l comes from anchor a_l"""
    rules = rules or RuleConfig()
    passes = [lrp_backward(trace, params, "attention", rules, path) for path in range(params.spec.paths)]
    maps = np.stack([bundle.maps[index] for index, bundle in enumerate(passes)])
    return RelevanceBundle(
        maps=maps,
        age_relevance=0.0,
        anchor="attention",
        anchor_value=float(sum(bundle.anchor_value for bundle in passes)),
        variant=rules.variant,
        rules=rules.model_dump(),
    )


def combined_map(bundle: RelevanceBundle, sample: "Sample") -> np.ndarray:
    """sum over contrasts of relevance * image"""
    volumes = np.asarray(sample.volumes, dtype=np.float64)
    if volumes.shape != bundle.maps.shape:
        raise ShapeError(f"Relevance maps {bundle.maps.shape} do not align with sample volumes {volumes.shape}")
    combined = (bundle.maps * volumes).sum(axis=0)
    bundle.combined = combined
    return combined


def explain(
    sample: "Sample",
    params: NetworkParams,
    anchor: str = "logit",
    rules: Optional[RuleConfig] = None,
) -> RelevanceBundle:
    """Forward in eval mode and redistribute; the attention anchor covers every path"""
    _, _, trace = forward(sample, params)
    if anchor == "attention":
        return lrp_attention_maps(trace, params, rules)
    return lrp_backward(trace, params, anchor, rules)


# ============================================================================
# GRADIENT BASELINES
# ============================================================================

def gradient_map(fn: Callable[[Tensor], Tensor], inputs: np.ndarray) -> np.ndarray:
    """d sum(fn(x)) / dx for a batched function fn: (1, ...) -> (1,)"""
    x = Tensor(np.asarray(inputs)[None], requires_grad=True)
    out = fn(x)
    tc.backward(tc.total(out))
    grad = x.grad if x.grad is not None else np.zeros_like(x.data)
    if not np.all(np.isfinite(grad)):
        raise NumericError("Non-finite gradient in saliency computation")
    return grad[0]


def integrated_gradients_map(
    fn: Callable[[Tensor], Tensor],
    inputs: np.ndarray,
    baseline: Optional[np.ndarray] = None,
    steps: int = 64,
    batch_size: int = 16,
) -> np.ndarray:
    """
    Midpoint Riemann sum of gradients along the straight path baseline -> input,
    scaled by (input - baseline).

    fn maps a batch (n, ...) to n scalars; batch elements must not interact.
    """
    if steps < 1:
        raise ConfigError(f"Integrated gradients needs steps >= 1, got {steps}")
    x = np.asarray(inputs, dtype=tc.default_dtype())
    base = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=x.dtype)
    if base.shape != x.shape:
        raise ShapeError(f"Baseline extents {base.shape} do not match input {x.shape}")
    delta = x - base
    alphas = (np.arange(steps) + 0.5) / steps
    accumulated = np.zeros_like(x)
    for start in range(0, steps, batch_size):
        chunk = alphas[start:start + batch_size].reshape((-1,) + (1,) * x.ndim)
        points = Tensor(base[None] + chunk * delta[None], requires_grad=True)
        tc.backward(tc.total(fn(points)))
        if points.grad is None:
            continue
        if not np.all(np.isfinite(points.grad)):
            raise NumericError("Non-finite gradient along the integration path")
        accumulated = accumulated + points.grad.sum(axis=0)
    return delta * accumulated / steps


def _network_fn(params: NetworkParams, age: float, anchor: str, path: Optional[int]) -> Callable[[Tensor], Tensor]:
    def fn(volumes: Tensor) -> Tensor:
        out = forward_batch(volumes, [age] * volumes.shape[0], params)
        if anchor == "logit":
            return out.logits
        return tc.select(out.attention, (slice(None), path))
    return fn


def _per_anchor(sample: "Sample", params: NetworkParams, anchor: str, compute) -> np.ndarray:
    volumes = np.asarray(sample.volumes)
    if anchor == "logit":
        return compute(_network_fn(params, sample.age, "logit", None))
    if anchor != "attention":
        raise ConfigError(f"Unknown anchor '{anchor}', expected 'logit' or 'attention'")
    maps = np.zeros(volumes.shape, dtype=np.float64)
    for path in range(params.spec.paths):
        maps[path] = compute(_network_fn(params, sample.age, "attention", path))[path]
    return maps


def saliency(sample: "Sample", params: NetworkParams, anchor: str = "logit") -> np.ndarray:
    """
    Absolute input gradient of the anchor scalar, per contrast (L, D, H, W).

    The attention anchor takes map l from d a_l / d x_l.
    """
    with tc.precision("f64"):
        volumes = np.asarray(sample.volumes, dtype=np.float64)
        return np.abs(_per_anchor(sample, params, anchor, lambda fn: gradient_map(fn, volumes)))


def integrated_gradients(
    sample: "Sample",
    params: NetworkParams,
    anchor: str = "logit",
    steps: int = 64,
    baseline: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Integrated gradients per contrast (L, D, H, W); default all-zero baseline"""
    with tc.precision("f64"):
        volumes = np.asarray(sample.volumes, dtype=np.float64)
        return _per_anchor(
            sample, params, anchor, lambda fn: integrated_gradients_map(fn, volumes, baseline, steps)
        )
