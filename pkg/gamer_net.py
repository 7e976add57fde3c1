"""
Multi-path gated-attention network

Architecture (one encoder per contrast, shared attention and classifier):
- Stem: Conv 3x3x3 (replication padding) -> BN -> ReLU -> MaxPool(3, 2, 1)
- Dense blocks: each dense layer is BN -> ReLU -> Conv 1x1x1 (bottleneck) ->
  BN -> ReLU -> Conv 3x3x3 (growth, replication padding), concatenated to its input
- Transitions between blocks: BN -> ReLU -> Conv 1x1x1 -> AvgPool(2, 2)
- Head: BN -> ReLU -> flatten -> FC(M) giving the hidden vector m_l
- Gated attention: s = tanh(U m_l), g = sigm(V m_l), e_l = w^T (s * g),
  a = softmax(e), n = sum_l a_l m_l
- Classifier: FC over concat(n, age / divisor) giving the logit f(x)

Also provides checkpoints (JSON manifest + TNS1 blobs in one file) and the
ForwardTrace consumed by the relevance engine.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

import tensorcore as tc
from errors import ConfigError, DataError, NumericError, ShapeError
from tensorcore import Tensor

if TYPE_CHECKING:
    from trainer import Sample

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.3.0"
CHECKPOINT_MAGIC = b"GMCK"

ATTENTION_KEYS = ("attention.U.weight", "attention.V.weight", "attention.w.weight")
CLASSIFIER_KEYS = ("classifier.weight", "classifier.bias")


class NetworkSpec(BaseModel):
    """Network geometry; defaults are the desk-scale configuration"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    paths: int = Field(3, ge=1, description="L: one encoder per contrast")
    input_extents: Tuple[int, int, int] = (32, 32, 32)
    init_filters: int = Field(16, ge=1)
    dense_blocks: int = Field(4, ge=1)
    layers_per_block: int = Field(2, ge=1)
    growth_rate: int = Field(4, ge=1)
    bottleneck_width: int = Field(16, ge=1)
    hidden_width: int = Field(32, ge=1, description="M")
    attention_width: int = Field(16, ge=1, description="K")
    age_divisor: float = Field(100.0, gt=0)
    bn_eps: float = Field(1e-5, ge=0)
    bn_momentum: float = Field(0.1, gt=0, le=1)


def micro_spec(paths: int = 3, **overrides) -> NetworkSpec:
    """Reduced network on 8^3 inputs used by gradient and conservation checks"""
    values = dict(
        paths=paths,
        input_extents=(8, 8, 8),
        init_filters=4,
        dense_blocks=1,
        layers_per_block=1,
        growth_rate=2,
        bottleneck_width=4,
        hidden_width=8,
        attention_width=4,
    )
    values.update(overrides)
    return NetworkSpec(**values)


# ============================================================================
# LAYER PLAN
# ============================================================================

@dataclass(frozen=True)
class LayerDef:
    """One entry of the layer list; dense layers carry their sub-layers"""
    name: str
    kind: str
    options: Dict[str, Any] = field(default_factory=dict)
    children: Tuple["LayerDef", ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"name": self.name, "kind": self.kind, "options": dict(self.options)}
        if self.children:
            data["children"] = [child.to_dict() for child in self.children]
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LayerDef":
        options = {k: tuple(v) if isinstance(v, list) else v for k, v in data.get("options", {}).items()}
        children = tuple(cls.from_dict(child) for child in data.get("children", []))
        return cls(data["name"], data["kind"], options, children)


def _conv(name: str, c_in: int, c_out: int, kernel: int, padding: int = 0, pad_mode: str = "zero") -> LayerDef:
    return LayerDef(name, "conv", {
        "in_channels": c_in, "out_channels": c_out, "kernel": kernel,
        "stride": 1, "padding": padding, "pad_mode": pad_mode,
    })


def _bn(name: str, channels: int) -> LayerDef:
    return LayerDef(name, "bn", {"channels": channels})


def _relu(name: str) -> LayerDef:
    return LayerDef(name, "relu")


def stage_extents(spec: NetworkSpec, extents: Optional[Sequence[int]] = None) -> List[Tuple[int, ...]]:
    """Spatial extents after the stem pool and after each transition"""
    current = tuple(spec.input_extents if extents is None else extents)
    current = tc.output_extents(current, 3, 2, 1)
    stages = [current]
    for _ in range(spec.dense_blocks - 1):
        current = tc.output_extents(current, 2, 2, 0)
        stages.append(current)
    return stages


def minimum_extent(spec: NetworkSpec) -> int:
    """Smallest cubic input extent that survives every reduction"""
    for extent in range(1, 1 << 16):
        if min(stage_extents(spec, (extent,) * 3)[-1]) >= 1:
            return extent
    raise ConfigError("No input extent survives the configured reductions")


def encoder_plan(spec: NetworkSpec, path: int) -> List[LayerDef]:
    prefix = f"p{path}"
    channels = spec.init_filters
    layers = [
        _conv(f"{prefix}.stem.conv", 1, channels, 3, padding=1, pad_mode="replicate"),
        _bn(f"{prefix}.stem.bn", channels),
        _relu(f"{prefix}.stem.relu"),
        LayerDef(f"{prefix}.stem.pool", "maxpool", {"kernel": 3, "stride": 2, "padding": 1}),
    ]
    for block in range(spec.dense_blocks):
        for index in range(spec.layers_per_block):
            name = f"{prefix}.block{block}.layer{index}"
            children = (
                _bn(f"{name}.bn1", channels),
                _relu(f"{name}.relu1"),
                _conv(f"{name}.conv1", channels, spec.bottleneck_width, 1),
                _bn(f"{name}.bn2", spec.bottleneck_width),
                _relu(f"{name}.relu2"),
                _conv(f"{name}.conv2", spec.bottleneck_width, spec.growth_rate, 3, padding=1, pad_mode="replicate"),
            )
            layers.append(LayerDef(name, "dense", {"in_channels": channels, "growth": spec.growth_rate}, children))
            channels += spec.growth_rate
        if block < spec.dense_blocks - 1:
            name = f"{prefix}.trans{block}"
            layers += [
                _bn(f"{name}.bn", channels),
                _relu(f"{name}.relu"),
                _conv(f"{name}.conv", channels, channels, 1),
                LayerDef(f"{name}.pool", "avgpool", {"kernel": 2, "stride": 2}),
            ]
    extents = stage_extents(spec)[-1]
    features = channels * int(np.prod(extents))
    layers += [
        _bn(f"{prefix}.head.bn", channels),
        _relu(f"{prefix}.head.relu"),
        LayerDef(f"{prefix}.head.flatten", "flatten", {"channels": channels, "extents": tuple(extents)}),
        LayerDef(f"{prefix}.head.fc", "fc", {"in_features": features, "out_features": spec.hidden_width}),
    ]
    return layers


def layer_plan(spec: NetworkSpec) -> List[List[LayerDef]]:
    return [encoder_plan(spec, path) for path in range(spec.paths)]


def encoder_channels(spec: NetworkSpec) -> int:
    """Feature-map channels entering the head: init + blocks * layers * growth"""
    return spec.init_filters + spec.dense_blocks * spec.layers_per_block * spec.growth_rate


def _walk(layers: Sequence[LayerDef]):
    for layer in layers:
        yield layer
        yield from _walk(layer.children)


def _layer_shapes(layer: LayerDef) -> Dict[str, Tuple[int, ...]]:
    o = layer.options
    if layer.kind == "conv":
        k = o["kernel"]
        return {f"{layer.name}.weight": (o["out_channels"], o["in_channels"], k, k, k),
                f"{layer.name}.bias": (o["out_channels"],)}
    if layer.kind == "bn":
        return {f"{layer.name}.gamma": (o["channels"],), f"{layer.name}.beta": (o["channels"],)}
    if layer.kind == "fc":
        return {f"{layer.name}.weight": (o["out_features"], o["in_features"]),
                f"{layer.name}.bias": (o["out_features"],)}
    return {}


def _head_shapes(spec: NetworkSpec) -> Dict[str, Tuple[int, ...]]:
    m, k = spec.hidden_width, spec.attention_width
    return {
        "attention.U.weight": (k, m),
        "attention.U.bias": (k,),
        "attention.V.weight": (k, m),
        "attention.V.bias": (k,),
        "attention.w.weight": (1, k),
        "classifier.weight": (1, m + 1),
        "classifier.bias": (1,),
    }


def parameter_count(spec: NetworkSpec) -> int:
    """Trainable parameter count derived from the layer list"""
    total = 0
    for path in layer_plan(spec):
        for layer in _walk(path):
            total += sum(int(np.prod(shape)) for shape in _layer_shapes(layer).values())
    total += sum(int(np.prod(shape)) for shape in _head_shapes(spec).values())
    return total


# ============================================================================
# PARAMETERS
# ============================================================================

@dataclass
class NetworkParams:
    """Trainable tensors, BN buffers and the layer list they belong to"""
    spec: NetworkSpec
    seed: int
    tensors: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    plan: List[List[LayerDef]]
    canonical: bool = False

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            spec=self.spec,
            seed=self.seed,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            plan=[list(path) for path in self.plan],
            canonical=self.canonical,
        )

    def leaves(self) -> Dict[str, Tensor]:
        """Gradient-tracking views over the trainable arrays"""
        return {name: Tensor(array, requires_grad=True, name=name) for name, array in self.tensors.items()}

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(b"canonical" if self.canonical else b"raw")
        for store in (self.tensors, self.buffers):
            for name in sorted(store):
                digest.update(name.encode())
                digest.update(np.ascontiguousarray(store[name], dtype=np.float32).tobytes())
        return digest.hexdigest()

    def check_finite(self) -> None:
        for name, array in {**self.tensors, **self.buffers}.items():
            if not np.all(np.isfinite(array)):
                raise NumericError(f"Parameter '{name}' contains non-finite values")


def build(spec: NetworkSpec, seed: int) -> NetworkParams:
    """
    Deterministically initialize a network.

    Weights use fan-in scaled uniform init (bound sqrt(6 / fan_in)); biases and
    BN shifts start at 0, BN scales at 1, running statistics at (0, 1).

    Raises:
        ConfigError: If the input extents collapse before the head
    """
    final = stage_extents(spec)[-1]
    if min(final) < 1:
        need = minimum_extent(spec)
        raise ConfigError(
            f"Input extents {spec.input_extents} are too small for {spec.dense_blocks} dense blocks "
            f"(stem pool + {spec.dense_blocks - 1} transitions): minimum extent is {need} per axis"
        )
    rng = np.random.default_rng(seed)
    plan = layer_plan(spec)
    tensors: Dict[str, np.ndarray] = {}
    buffers: Dict[str, np.ndarray] = {}

    def init_weight(name: str, shape: Tuple[int, ...]) -> None:
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)

    for path in plan:
        for layer in _walk(path):
            for name, shape in _layer_shapes(layer).items():
                if name.endswith(".weight"):
                    init_weight(name, shape)
                elif name.endswith(".gamma"):
                    tensors[name] = np.ones(shape, dtype=np.float32)
                else:
                    tensors[name] = np.zeros(shape, dtype=np.float32)
            if layer.kind == "bn":
                channels = layer.options["channels"]
                buffers[f"{layer.name}.running_mean"] = np.zeros(channels, dtype=np.float32)
                buffers[f"{layer.name}.running_var"] = np.ones(channels, dtype=np.float32)
    for name, shape in _head_shapes(spec).items():
        if name.endswith(".weight"):
            init_weight(name, shape)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)

    params = NetworkParams(spec=spec, seed=seed, tensors=tensors, buffers=buffers, plan=plan)
    logger.info(f"✓ Built network: {spec.paths} paths, {parameter_count(spec)} parameters (seed {seed})")
    return params


# ============================================================================
# FORWARD
# ============================================================================

class _Weights:
    """Resolves parameter names to tensors (grad-tracking leaves when given)"""

    def __init__(self, params: NetworkParams, leaves: Optional[Mapping[str, Tensor]] = None):
        self.params = params
        self.leaves = leaves or {}
        self.cache: Dict[str, Tensor] = {}

    def __call__(self, name: str) -> Tensor:
        if name in self.leaves:
            return self.leaves[name]
        if name not in self.cache:
            self.cache[name] = Tensor(self.params.tensors[name])
        return self.cache[name]

    def buffer(self, name: str) -> np.ndarray:
        return self.params.buffers[name]


def _run_layers(
    layers: Sequence[LayerDef],
    x: Tensor,
    weights: _Weights,
    training: bool,
    record: Optional[Dict[str, np.ndarray]],
) -> Tensor:
    spec = weights.params.spec
    for layer in layers:
        o = layer.options
        if layer.kind == "conv":
            x = tc.conv3d(x, weights(f"{layer.name}.weight"), weights(f"{layer.name}.bias"),
                          stride=o["stride"], padding=o["padding"], pad_mode=o["pad_mode"])
        elif layer.kind == "bn":
            x = tc.batchnorm(
                x, weights(f"{layer.name}.gamma"), weights(f"{layer.name}.beta"),
                weights.buffer(f"{layer.name}.running_mean"), weights.buffer(f"{layer.name}.running_var"),
                training=training, momentum=spec.bn_momentum, eps=spec.bn_eps,
            )
        elif layer.kind == "relu":
            x = tc.relu(x)
        elif layer.kind == "trelu":
            x = tc.threshold_relu(x, weights.buffer(f"{layer.name}.sign"), weights.buffer(f"{layer.name}.shift"))
        elif layer.kind == "maxpool":
            x = tc.maxpool3d(x, o["kernel"], o["stride"], o["padding"])
        elif layer.kind == "avgpool":
            x = tc.avgpool3d(x, o["kernel"], o["stride"])
        elif layer.kind == "dense":
            grown = _run_layers(layer.children, x, weights, training, record)
            x = tc.concat([x, grown], axis=1)
        elif layer.kind == "flatten":
            x = tc.reshape(x, (x.shape[0], -1))
        elif layer.kind == "fc":
            x = tc.linear(x, weights(f"{layer.name}.weight"), weights(f"{layer.name}.bias"))
        else:
            raise ConfigError(f"Unknown layer kind '{layer.kind}' in {layer.name}")
        if record is not None:
            record[layer.name] = x.data[0].copy()
    return x


@dataclass
class AttentionOutput:
    attention: Tensor   # (N, L)
    combined: Tensor    # (N, M)
    signal: List[Tensor]
    gate: List[Tensor]
    scores: Tensor      # (N, L) pre-softmax


def _attend(hidden: Sequence[Tensor], weights) -> AttentionOutput:
    U, V, w = weights("attention.U.weight"), weights("attention.V.weight"), weights("attention.w.weight")
    bu, bv = weights("attention.U.bias"), weights("attention.V.bias")
    signals, gates, scores = [], [], []
    for m in hidden:
        s = tc.tanh(tc.linear(m, U, bu))
        g = tc.sigmoid(tc.linear(m, V, bv))
        signals.append(s)
        gates.append(g)
        scores.append(tc.linear(tc.mul(s, g), w))
    e = tc.concat(scores, axis=1)
    a = tc.softmax(e, axis=1)
    n = None
    for index, m in enumerate(hidden):
        term = tc.scale(tc.select(a, (slice(None), index)), m)
        n = term if n is None else tc.add(n, term)
    return AttentionOutput(attention=a, combined=n, signal=signals, gate=gates, scores=e)


def gated_attention(
    m: Sequence[np.ndarray],
    params: Union[NetworkParams, Mapping[str, np.ndarray]],
) -> Tuple[np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    """
    Gated attention pooling over L hidden vectors.

    Args:
        m: L vectors of length M
        params: NetworkParams or a mapping with attention.U/V/w weights
            (attention.U.bias / attention.V.bias optional, default zero)

    Returns:
        (a, n, internals) with internals holding s, g and the pre-softmax scores

    Raises:
        NumericError: If any input is non-finite
    """
    stacked = np.asarray([np.asarray(v, dtype=np.float64).reshape(-1) for v in m])
    if stacked.ndim != 2 or stacked.shape[0] < 1:
        raise ShapeError(f"gated_attention needs L >= 1 vectors of equal length, got {len(m)}")
    if not np.all(np.isfinite(stacked)):
        raise NumericError("gated_attention received non-finite hidden vectors")
    store = params.tensors if isinstance(params, NetworkParams) else params
    k = np.asarray(store["attention.U.weight"]).shape[0]

    def lookup(name: str) -> Tensor:
        if name in store:
            return Tensor(store[name])
        return Tensor(np.zeros(k))

    with tc.precision("f64"):
        out = _attend([Tensor(row[None]) for row in stacked], lookup)
    internals = {
        "signal": np.stack([s.data[0] for s in out.signal]),
        "gate": np.stack([g.data[0] for g in out.gate]),
        "scores": out.scores.data[0],
    }
    return out.attention.data[0], out.combined.data[0], internals


@dataclass
class BatchOutput:
    logits: Tensor        # (N,)
    attention: Tensor     # (N, L)
    hidden: List[Tensor]  # L tensors (N, M)
    heads: AttentionOutput
    age_feature: np.ndarray


def _check_inputs(volumes_shape: Tuple[int, ...], spec: NetworkSpec) -> None:
    if len(volumes_shape) != 5 or volumes_shape[1] != spec.paths:
        raise ShapeError(
            f"Expected input (N, {spec.paths}, D, H, W) for {spec.paths} paths, got shape {volumes_shape}"
        )
    if tuple(volumes_shape[2:]) != tuple(spec.input_extents):
        raise ShapeError(f"Volume extents {volumes_shape[2:]} do not match network extents {spec.input_extents}")


def forward_batch(
    volumes: Union[Tensor, np.ndarray],
    ages: Sequence[float],
    params: NetworkParams,
    training: bool = False,
    leaves: Optional[Mapping[str, Tensor]] = None,
    records: Optional[List[Dict[str, np.ndarray]]] = None,
) -> BatchOutput:
    """
    Batched forward pass.

    Args:
        volumes: (N, L, D, H, W) images or a Tensor of that shape
        ages: N ages in years
        params: Network parameters (raw or canonical)
        training: Use batch statistics in BN layers and update running buffers
        leaves: Gradient-tracking parameter tensors (see NetworkParams.leaves)
        records: Per-path dicts receiving layer outputs of the first sample

    Returns:
        BatchOutput with logits (N,) and attention weights (N, L)
    """
    spec = params.spec
    x = tc.as_tensor(volumes)
    _check_inputs(x.shape, spec)
    age = np.asarray(ages, dtype=np.float64).reshape(-1)
    if age.shape[0] != x.shape[0]:
        raise ShapeError(f"Got {age.shape[0]} ages for {x.shape[0]} samples")
    if np.any(age < 0):
        raise DataError(f"Ages must be non-negative, got {age.min()}")
    weights = _Weights(params, leaves)

    hidden = []
    for path, layers in enumerate(params.plan):
        record = records[path] if records is not None else None
        contrast = tc.select(x, (slice(None), slice(path, path + 1)))
        hidden.append(_run_layers(layers, contrast, weights, training, record))
    heads = _attend(hidden, weights)
    age_feature = age / spec.age_divisor
    features = tc.concat([heads.combined, Tensor(age_feature[:, None])], axis=1)
    logits = tc.reshape(tc.linear(features, weights("classifier.weight"), weights("classifier.bias")), (-1,))
    return BatchOutput(logits=logits, attention=heads.attention, hidden=hidden, heads=heads,
                       age_feature=age_feature)


@dataclass
class ForwardTrace:
    """Everything a relevance pass needs to replay one forward evaluation"""
    volumes: np.ndarray              # (L, D, H, W) inputs
    age: float
    age_feature: float
    activations: List[Dict[str, np.ndarray]]
    hidden: np.ndarray               # (L, M) m_l
    signal: np.ndarray               # (L, K) s
    gate: np.ndarray                 # (L, K) g
    scores: np.ndarray               # (L,) pre-softmax attention logits
    attention: np.ndarray            # (L,) a_l
    combined: np.ndarray             # (M,) n
    logit: float
    probability: float
    params_fingerprint: str
    canonical: bool

    def check_invariants(self, tol: float = 1e-6) -> None:
        """Attention sums to one and n matches sum_l a_l m_l"""
        if abs(float(self.attention.sum()) - 1.0) > tol:
            raise NumericError(f"Attention weights sum to {self.attention.sum()}, expected 1")
        if len(self.attention) > 1 and (np.any(self.attention <= 0) or np.any(self.attention >= 1)):
            raise NumericError(f"Attention weights outside (0, 1): {self.attention}")
        recombined = (self.attention[:, None].astype(np.float64) * self.hidden).sum(axis=0)
        if np.max(np.abs(recombined - self.combined)) > tol * max(1.0, float(np.abs(self.combined).max())):
            raise NumericError("Combined vector n does not match sum_l a_l m_l")


def forward(sample: "Sample", params: NetworkParams) -> Tuple[float, float, ForwardTrace]:
    """
    Evaluate one sample in inference mode and record a full trace.

    Returns:
        (probability, logit f(x), ForwardTrace)

    Raises:
        ShapeError: Wrong path count or extents
        DataError: Negative age
    """
    volumes = np.asarray(sample.volumes)
    if volumes.ndim != 4:
        raise ShapeError(f"Sample volumes must be (L, D, H, W), got shape {volumes.shape}")
    records: List[Dict[str, np.ndarray]] = [{} for _ in range(params.spec.paths)]
    out = forward_batch(volumes[None], [sample.age], params, training=False, records=records)
    logit = float(out.logits.data[0])
    probability = float(expit(logit))
    heads = out.heads
    trace = ForwardTrace(
        volumes=volumes.copy(),
        age=float(sample.age),
        age_feature=float(out.age_feature[0]),
        activations=records,
        hidden=np.stack([m.data[0] for m in out.hidden]),
        signal=np.stack([s.data[0] for s in heads.signal]),
        gate=np.stack([g.data[0] for g in heads.gate]),
        scores=heads.scores.data[0].copy(),
        attention=heads.attention.data[0].copy(),
        combined=heads.combined.data[0].copy(),
        logit=logit,
        probability=probability,
        params_fingerprint=params.fingerprint(),
        canonical=params.canonical,
    )
    return probability, logit, trace


def predict(
    samples: Sequence["Sample"], params: NetworkParams, batch_size: int = 16
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Inference over many samples.

    Returns:
        (probabilities (N,), logits (N,), attention weights (N, L))
    """
    logits, attention = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        out = forward_batch(np.stack([s.volumes for s in chunk]), [s.age for s in chunk], params)
        logits.append(out.logits.data.astype(np.float64))
        attention.append(out.attention.data.astype(np.float64))
    if not logits:
        return np.zeros(0), np.zeros(0), np.zeros((0, params.spec.paths))
    f = np.concatenate(logits)
    return expit(f), f, np.concatenate(attention)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_checkpoint(params: NetworkParams, path: Union[str, Path]) -> Path:
    """Write header, u32 manifest length, JSON manifest, then TNS1 blobs"""
    blobs: List[bytes] = []
    entries = []
    offset = 0
    for kind, store in (("param", params.tensors), ("buffer", params.buffers)):
        for name in sorted(store):
            blob = tc.encode_tensor(store[name])
            entries.append({"name": name, "kind": kind, "offset": offset, "length": len(blob)})
            blobs.append(blob)
            offset += len(blob)
    manifest = {
        "format": 1,
        "tool_version": TOOL_VERSION,
        "spec": params.spec.model_dump(mode="json"),
        "seed": params.seed,
        "canonical": params.canonical,
        "layers": [[layer.to_dict() for layer in path_layers] for path_layers in params.plan],
        "blobs": entries,
    }
    encoded = json.dumps(manifest, sort_keys=True).encode("utf-8")
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(encoded)) + encoded + b"".join(blobs))
    logger.info(f"✓ Saved checkpoint {target} ({len(entries)} tensors)")
    return target


def load_checkpoint(path: Union[str, Path], expected_spec: Optional[NetworkSpec] = None) -> NetworkParams:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        DataError: Missing file, bad magic or truncated blobs
        ConfigError: Stored spec differs from expected_spec
    """
    source = Path(path)
    if not source.is_file():
        raise DataError(f"Checkpoint not found: {source}")
    raw = source.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC or len(raw) < 8:
        raise DataError(f"{source}: not a checkpoint file")
    (length,) = struct.unpack_from("<I", raw, 4)
    try:
        manifest = json.loads(raw[8:8 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{source}: unreadable manifest: {e}")
    spec = NetworkSpec(**manifest["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise ConfigError(
            f"Checkpoint spec does not match configured network spec: "
            f"stored {spec.model_dump()} vs configured {expected_spec.model_dump()}"
        )
    base = 8 + length
    tensors: Dict[str, np.ndarray] = {}
    buffers: Dict[str, np.ndarray] = {}
    for entry in manifest["blobs"]:
        array, end = tc.decode_tensor(raw, base + entry["offset"])
        if end - (base + entry["offset"]) != entry["length"]:
            raise DataError(f"{source}: blob '{entry['name']}' length mismatch")
        (tensors if entry["kind"] == "param" else buffers)[entry["name"]] = array.copy()
    plan = [[LayerDef.from_dict(layer) for layer in path_layers] for path_layers in manifest["layers"]]
    params = NetworkParams(spec=spec, seed=int(manifest["seed"]), tensors=tensors, buffers=buffers,
                           plan=plan, canonical=bool(manifest["canonical"]))
    logger.info(f"✓ Loaded checkpoint {source}")
    return params
