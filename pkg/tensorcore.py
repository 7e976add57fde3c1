"""
Tensor Core - dense N-D tensors with reverse-mode differentiation

Provides:
- Tensor: numpy-backed array with an optional gradient buffer and graph node
- Forward ops used by the network: conv3d, linear, batchnorm, threshold_relu,
  relu, tanh, sigmoid, softmax, maxpool3d, avgpool3d, concat, mul, scale, add,
  reshape, select, total, bce_with_logits
- backward(): iterative topological sweep with cycle detection
- finite_diff_check(): central-difference gradient oracle
- Array kernels shared with the relevance engine (conv3d_array and friends)
- TNS1 binary blob codec used inside checkpoints and volume files

Volumes are channels-first: (C, D, H, W), or (N, C, D, H, W) for batches.
Float32 by default; precision("f64") switches newly created tensors to float64
for verification passes.
"""

import logging
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, softmax as _softmax

from errors import ConfigError, DataError, NumericError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
Triple = Union[int, Tuple[int, int, int]]

PAD_MODES = ("zero", "replicate")
_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = threading.local()


# ============================================================================
# PRECISION
# ============================================================================

def default_dtype() -> type:
    """Float type used for newly created tensors in the current thread"""
    return getattr(_state, "dtype", np.float32)


@contextmanager
def precision(mode: str = "f64"):
    """
    Switch the default float type for the current thread.

    Usage:
        with precision("f64"):
            error = finite_diff_check(f, x)
    """
    if mode not in _DTYPES:
        raise ConfigError(f"Unknown precision mode '{mode}', expected one of {sorted(_DTYPES)}")
    previous = default_dtype()
    _state.dtype = _DTYPES[mode]
    try:
        yield
    finally:
        _state.dtype = previous


# ============================================================================
# GRAPH TYPES
# ============================================================================

class OpKind(str, Enum):
    CONV3D = "conv3d"
    FC = "fc"
    BATCHNORM = "batchnorm"
    RELU = "relu"
    THRESHOLD_RELU = "threshold-relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"
    MAXPOOL = "maxpool"
    AVGPOOL = "avgpool"
    CONCAT = "concat"
    MUL = "elementwise-mul"
    SCALE = "scalar-vector-mul"
    ADD = "add"
    RESHAPE = "reshape"
    SELECT = "select"
    SUM = "sum"
    BCE = "bce-with-logits"


@dataclass(eq=False)
class OpNode:
    """Recorded operation: kind, input tensors and the local vector-Jacobian product"""
    kind: OpKind
    inputs: Tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    saved: Dict[str, Any] = field(default_factory=dict)


class Tensor:
    """Dense tensor; leaves with requires_grad collect gradients in .grad"""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _node: Optional[OpNode] = None,
    ):
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = bool(requires_grad or _node is not None)
        self.grad: Optional[np.ndarray] = None
        self.node = _node
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.shape:
            raise ShapeError(f"Gradient shape {grad.shape} does not match tensor shape {self.shape}")
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __getitem__(self, index) -> "Tensor":
        return select(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None) -> "Tensor":
        return total(self, axis)

    def __repr__(self) -> str:
        kind = self.node.kind.value if self.node is not None else "leaf"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={kind})"


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, kind: OpKind, inputs: Sequence[Tensor], backward_fn, **saved) -> Tensor:
    if any(t.requires_grad for t in inputs):
        return Tensor(data, _node=OpNode(kind, tuple(inputs), backward_fn, saved))
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ============================================================================
# BACKWARD
# ============================================================================

def _topological_order(root: Tensor) -> List[Tensor]:
    """Post-order of the graph under root; rejects cycles"""
    visiting, done = 1, 2
    state: Dict[int, int] = {}
    order: List[Tensor] = []
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        key = id(tensor)
        if expanded:
            state[key] = done
            order.append(tensor)
            continue
        if state.get(key) == done:
            continue
        if state.get(key) == visiting:
            raise DataError("Computation graph contains a cycle")
        state[key] = visiting
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                mark = state.get(id(parent))
                if mark == visiting:
                    raise DataError(
                        f"Computation graph contains a cycle through a {tensor.node.kind.value} node"
                    )
                if mark is None:
                    stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """
    Reverse-mode sweep from a scalar root.

    Each leaf with requires_grad receives d(root)/d(leaf) in its gradient buffer
    (accumulated onto any existing buffer).

    Raises:
        ShapeError: If root is not scalar-valued
        DataError: If the recorded graph contains a cycle
    """
    if root.size != 1:
        raise ShapeError(f"backward() needs a scalar root, got shape {root.shape}")
    order = _topological_order(root)
    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for tensor in reversed(order):
        grad = grads.pop(id(tensor), None)
        if grad is None:
            continue
        if tensor.node is None:
            if tensor.requires_grad:
                tensor._accumulate(grad)
            continue
        for parent, parent_grad in zip(tensor.node.inputs, tensor.node.backward_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Union[Tensor, ArrayLike],
    h: float = 1e-5,
    floor: float = 1e-12,
    indices: Optional[Iterable[int]] = None,
) -> float:
    """
    Compare autodiff against central differences.

    Args:
        f: Scalar-valued function of one tensor
        x: Evaluation point
        h: Finite-difference step
        floor: Lower bound of the relative-error denominator
        indices: Flat coordinates to probe (all when None)

    Returns:
        max_i |autodiff_i - cd_i| / max(|cd_i|, floor)

    Raises:
        ConfigError: If h <= 0
        NumericError: If f is non-finite anywhere it is evaluated
    """
    if h <= 0:
        raise ConfigError(f"Finite-difference step must be positive, got {h}")
    point = as_tensor(x).data.copy()
    probe = Tensor(point.copy(), requires_grad=True)
    out = f(probe)
    _require_finite_scalar(out, "f(x)")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(point)

    coords = range(point.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        shifted = point.copy()
        shifted.flat[i] += h
        f_plus = _require_finite_scalar(f(Tensor(shifted)), f"f(x + h e_{i})")
        shifted.flat[i] -= 2 * h
        f_minus = _require_finite_scalar(f(Tensor(shifted)), f"f(x - h e_{i})")
        central = (f_plus - f_minus) / (2 * h)
        error = abs(float(analytic.flat[i]) - central) / max(abs(central), floor)
        worst = max(worst, error)
    return worst


def _require_finite_scalar(value: Tensor, what: str) -> float:
    scalar = as_tensor(value).item()
    if not np.isfinite(scalar):
        raise NumericError(f"Non-finite evaluation of {what}: {scalar}")
    return scalar


# ============================================================================
# ARRAY KERNELS (shared with the relevance engine)
# ============================================================================

def triple(value: Triple) -> Tuple[int, int, int]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * 3
    values = tuple(int(v) for v in value)
    if len(values) != 3:
        raise ConfigError(f"Expected 3 spatial values, got {values}")
    return values


def _clamp_index(extent: int, pad: int) -> np.ndarray:
    return np.clip(np.arange(-pad, extent + pad), 0, extent - 1)


def pad_volume(x: np.ndarray, padding: Triple, mode: str = "zero") -> np.ndarray:
    """Pad the last three axes with zeros or by index clamping (replication)"""
    if mode not in PAD_MODES:
        raise ConfigError(f"Unknown padding mode '{mode}', expected one of {PAD_MODES}")
    pad = triple(padding)
    if not any(pad):
        return x
    if mode == "zero":
        widths = [(0, 0)] * (x.ndim - 3) + [(p, p) for p in pad]
        return np.pad(x, widths)
    out = x
    for axis, p in zip(range(x.ndim - 3, x.ndim), pad):
        if p:
            out = np.take(out, _clamp_index(out.shape[axis], p), axis=axis)
    return out


def unpad_gradient(grad: np.ndarray, padding: Triple, mode: str, shape: Tuple[int, ...]) -> np.ndarray:
    """Adjoint of pad_volume: crop (zero) or fold border values onto source voxels (replicate)"""
    pad = triple(padding)
    if not any(pad):
        return grad
    spatial = tuple(shape[-3:])
    if mode == "zero":
        index = (Ellipsis,) + tuple(slice(p, p + n) for p, n in zip(pad, spatial))
        return grad[index]
    out = grad
    for axis, p, extent in zip(range(grad.ndim - 3, grad.ndim), pad, spatial):
        if not p:
            continue
        folded_shape = list(out.shape)
        folded_shape[axis] = extent
        folded = np.zeros(folded_shape, dtype=out.dtype)
        index: List[Any] = [slice(None)] * out.ndim
        index[axis] = _clamp_index(extent, p)
        np.add.at(folded, tuple(index), out)
        out = folded
    return out


def output_extents(extents: Sequence[int], kernel: Triple, stride: Triple, padding: Triple) -> Tuple[int, ...]:
    """floor((n + 2p - k) / s) + 1 per axis"""
    return tuple(
        (n + 2 * p - k) // s + 1
        for n, k, s, p in zip(extents, triple(kernel), triple(stride), triple(padding))
    )


def _window(offset: Tuple[int, int, int], stride: Tuple[int, int, int], extents: Sequence[int]) -> Tuple[slice, ...]:
    return (Ellipsis,) + tuple(
        slice(o, o + s * (e - 1) + 1, s) for o, s, e in zip(offset, stride, extents)
    )


def _check_conv(x: np.ndarray, weight: np.ndarray, stride: Triple, padding: Triple) -> Tuple[int, ...]:
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects input (N, C, D, H, W), got shape {x.shape}")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d expects kernel (F, C, kd, kh, kw), got shape {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv3d channel mismatch: kernel expects {weight.shape[1]} input channels, "
            f"input has {x.shape[1]} (input {x.shape}, kernel {weight.shape})"
        )
    if any(s <= 0 for s in triple(stride)):
        raise ConfigError(f"conv3d stride must be positive, got {stride}")
    if any(p < 0 for p in triple(padding)):
        raise ConfigError(f"conv3d padding must be non-negative, got {padding}")
    extents = output_extents(x.shape[2:], weight.shape[2:], stride, padding)
    if any(e < 1 for e in extents):
        raise ShapeError(
            f"conv3d output collapses: input extents {x.shape[2:]}, kernel {weight.shape[2:]}, "
            f"stride {stride}, padding {padding} -> {extents}"
        )
    return extents


def conv3d_array(
    x: np.ndarray, weight: np.ndarray, stride: Triple = 1, padding: Triple = 0, pad_mode: str = "zero"
) -> np.ndarray:
    """Bias-free cross-correlation: (N, C, D, H, W) * (F, C, kd, kh, kw) -> (N, F, D', H', W')"""
    extents = _check_conv(x, weight, stride, padding)
    step = triple(stride)
    xp = pad_volume(x, padding, pad_mode)
    dtype = np.result_type(x.dtype, weight.dtype)
    out = np.zeros((weight.shape[0], x.shape[0]) + extents, dtype=dtype)
    for offset in np.ndindex(*weight.shape[2:]):
        patch = xp[_window(offset, step, extents)]
        out += np.tensordot(weight[(slice(None), slice(None)) + offset], patch, axes=([1], [1]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))


def conv3d_transpose_array(
    grad_out: np.ndarray,
    weight: np.ndarray,
    input_shape: Tuple[int, ...],
    stride: Triple = 1,
    padding: Triple = 0,
    pad_mode: str = "zero",
) -> np.ndarray:
    """Adjoint of conv3d_array with respect to its input"""
    step = triple(stride)
    pad = triple(padding)
    padded = tuple(n + 2 * p for n, p in zip(input_shape[2:], pad))
    dtype = np.result_type(grad_out.dtype, weight.dtype)
    grad_t = np.zeros((input_shape[1], input_shape[0]) + padded, dtype=dtype)
    out_t = grad_out.transpose(1, 0, 2, 3, 4)
    extents = grad_out.shape[2:]
    for offset in np.ndindex(*weight.shape[2:]):
        grad_t[_window(offset, step, extents)] += np.tensordot(
            weight[(slice(None), slice(None)) + offset], out_t, axes=([0], [0])
        )
    grad_padded = grad_t.transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(unpad_gradient(grad_padded, pad, pad_mode, input_shape))


def conv3d_weight_grad(
    x: np.ndarray,
    grad_out: np.ndarray,
    kernel_shape: Tuple[int, ...],
    stride: Triple = 1,
    padding: Triple = 0,
    pad_mode: str = "zero",
) -> np.ndarray:
    step = triple(stride)
    xp = pad_volume(x, padding, pad_mode)
    dtype = np.result_type(x.dtype, grad_out.dtype)
    grad_w = np.zeros(kernel_shape, dtype=dtype)
    extents = grad_out.shape[2:]
    for offset in np.ndindex(*kernel_shape[2:]):
        patch = xp[_window(offset, step, extents)]
        grad_w[(slice(None), slice(None)) + offset] = np.tensordot(
            grad_out, patch, axes=([0, 2, 3, 4], [0, 2, 3, 4])
        )
    return grad_w


def maxpool3d_array(
    x: np.ndarray, kernel: int = 3, stride: int = 2, padding: int = 1
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Max pooling over (N, C, D, H, W) with -inf padding.

    Returns:
        (pooled values, winners) where winners are flat indices into the padded
        spatial grid; ties go to the first window element in C order.
    """
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d expects (N, C, D, H, W), got shape {x.shape}")
    k, s, p = triple(kernel), triple(stride), triple(padding)
    extents = output_extents(x.shape[2:], k, s, p)
    if any(e < 1 for e in extents):
        raise ShapeError(f"maxpool3d output collapses for input extents {x.shape[2:]}")
    widths = [(0, 0), (0, 0)] + [(q, q) for q in p]
    xp = np.pad(x, widths, constant_values=-np.inf)
    best = np.full(x.shape[:2] + extents, -np.inf, dtype=x.dtype)
    choice = np.zeros(best.shape, dtype=np.int64)
    for position, offset in enumerate(np.ndindex(*k)):
        patch = xp[_window(offset, s, extents)]
        better = patch > best
        best = np.where(better, patch, best)
        choice = np.where(better, position, choice)
    kd, kh, kw = np.unravel_index(choice, k)
    grid = [np.arange(e).reshape([-1 if a == i else 1 for a in range(3)]) for i, e in enumerate(extents)]
    _, ph, pw = xp.shape[2:]
    winners = ((grid[0] * s[0] + kd) * ph + (grid[1] * s[1] + kh)) * pw + (grid[2] * s[2] + kw)
    return best, winners


def maxpool3d_scatter(
    values: np.ndarray, winners: np.ndarray, input_shape: Tuple[int, ...], padding: int = 1
) -> np.ndarray:
    """Route pooled values back to their winning input voxels (summing overlaps)"""
    n, c = values.shape[:2]
    pad = triple(padding)
    padded = tuple(e + 2 * q for e, q in zip(input_shape[2:], pad))
    flat = np.zeros((n, c, int(np.prod(padded))), dtype=values.dtype)
    np.add.at(
        flat,
        (np.arange(n)[:, None, None], np.arange(c)[None, :, None], winners.reshape(n, c, -1)),
        values.reshape(n, c, -1),
    )
    return unpad_gradient(flat.reshape((n, c) + padded), pad, "zero", input_shape)


def avgpool3d_array(x: np.ndarray, kernel: int = 2, stride: int = 2) -> np.ndarray:
    if x.ndim != 5:
        raise ShapeError(f"avgpool3d expects (N, C, D, H, W), got shape {x.shape}")
    k, s = triple(kernel), triple(stride)
    extents = output_extents(x.shape[2:], k, s, 0)
    if any(e < 1 for e in extents):
        raise ShapeError(f"avgpool3d output collapses for input extents {x.shape[2:]}")
    out = np.zeros(x.shape[:2] + extents, dtype=x.dtype)
    for offset in np.ndindex(*k):
        out += x[_window(offset, s, extents)]
    return out / float(np.prod(k))


def avgpool3d_spread(values: np.ndarray, input_shape: Tuple[int, ...], kernel: int = 2, stride: int = 2) -> np.ndarray:
    """Adjoint of the window sum (no 1/k^3 factor)"""
    k, s = triple(kernel), triple(stride)
    out = np.zeros(input_shape, dtype=values.dtype)
    for offset in np.ndindex(*k):
        out[_window(offset, s, values.shape[2:])] += values
    return out


# ============================================================================
# FORWARD OPS
# ============================================================================

def conv3d(
    input: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: Triple = 1,
    padding: Triple = 0,
    pad_mode: str = "zero",
) -> Tensor:
    """
    3-D cross-correlation with optional bias.

    Args:
        input: (C, D, H, W) or batched (N, C, D, H, W)
        kernel: (F, C, kd, kh, kw)
        bias: (F,) or None
        stride: Positive step per axis
        padding: Border width per axis
        pad_mode: "zero" or "replicate"

    Returns:
        (F, D', H', W') or (N, F, D', H', W')

    Raises:
        ShapeError: Channel mismatch or collapsing output extents
        ConfigError: Non-positive stride or unknown padding mode
    """
    x, w = as_tensor(input), as_tensor(kernel)
    unbatched = x.ndim == 4
    x5 = x.data[None] if unbatched else x.data
    out = conv3d_array(x5, w.data, stride, padding, pad_mode)
    inputs = [x, w]
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv3d bias shape {b.shape} does not match {w.shape[0]} filters")
        out = out + b.data.reshape(1, -1, 1, 1, 1)
        inputs.append(b)

    def backward_fn(grad):
        g5 = grad[None] if unbatched else grad
        grad_x = conv3d_transpose_array(g5, w.data, x5.shape, stride, padding, pad_mode)
        grads = [
            grad_x[0] if unbatched else grad_x,
            conv3d_weight_grad(x5, g5, w.shape, stride, padding, pad_mode),
        ]
        if bias is not None:
            grads.append(g5.sum(axis=(0, 2, 3, 4)))
        return grads

    return _result(out[0] if unbatched else out, OpKind.CONV3D, inputs, backward_fn,
                   stride=stride, padding=padding, pad_mode=pad_mode)


def linear(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Fully connected layer over the last axis: x @ W.T + b"""
    x, w = as_tensor(input), as_tensor(weight)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear expects {w.shape[1]} input features, got shape {x.shape}")
    out = x.data @ w.data.T
    inputs = [x, w]
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear bias shape {b.shape} does not match {w.shape[0]} outputs")
        out = out + b.data
        inputs.append(b)

    def backward_fn(grad):
        flat_g = grad.reshape(-1, w.shape[0])
        flat_x = x.data.reshape(-1, w.shape[1])
        grads = [grad @ w.data, flat_g.T @ flat_x]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return grads

    return _result(out, OpKind.FC, inputs, backward_fn)


def batchnorm(
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool = False,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """
    Batch normalization over channel axis 1 of a batched input.

    Training mode normalizes with batch statistics and updates the running
    buffers in place; eval mode uses the frozen running statistics.
    """
    x, g, b = as_tensor(input), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2 or x.shape[1] != g.shape[0]:
        raise ShapeError(f"batchnorm expects (N, {g.shape[0]}, ...), got shape {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    count = x.size // x.shape[1]
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean[...] = (1 - momentum) * running_mean + momentum * mean
        running_var[...] = (1 - momentum) * running_var + momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    out = g.data.reshape(shape) * x_hat + b.data.reshape(shape)

    def backward_fn(grad):
        grad_gamma = (grad * x_hat).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        grad_hat = grad * g.data.reshape(shape)
        if training:
            grad_x = (inv_std.reshape(shape) / count) * (
                count * grad_hat
                - grad_hat.sum(axis=axes, keepdims=True)
                - x_hat * (grad_hat * x_hat).sum(axis=axes, keepdims=True)
            )
        else:
            grad_x = grad_hat * inv_std.reshape(shape)
        return [grad_x, grad_gamma, grad_beta]

    return _result(out, OpKind.BATCHNORM, [x, g, b], backward_fn, training=training)


def relu(input: Tensor) -> Tensor:
    x = as_tensor(input)
    active = x.data > 0
    return _result(np.where(active, x.data, 0), OpKind.RELU, [x], lambda grad: [grad * active])


def threshold_relu(input: Tensor, sign: np.ndarray, shift: np.ndarray) -> Tensor:
    """Per-channel ReLU(sign * x + shift) over channel axis 1 (canonized BN + ReLU)"""
    x = as_tensor(input)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    s = np.asarray(sign).reshape(shape)
    pre = s * x.data + np.asarray(shift).reshape(shape)
    active = pre > 0
    return _result(np.where(active, pre, 0), OpKind.THRESHOLD_RELU, [x], lambda grad: [grad * active * s])


def tanh(input: Tensor) -> Tensor:
    x = as_tensor(input)
    out = np.tanh(x.data)
    return _result(out, OpKind.TANH, [x], lambda grad: [grad * (1 - out * out)])


def sigmoid(input: Tensor) -> Tensor:
    x = as_tensor(input)
    out = expit(x.data)
    return _result(out, OpKind.SIGMOID, [x], lambda grad: [grad * out * (1 - out)])


def softmax(input: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(input)
    out = _softmax(x.data, axis=axis)

    def backward_fn(grad):
        return [out * (grad - (grad * out).sum(axis=axis, keepdims=True))]

    return _result(out, OpKind.SOFTMAX, [x], backward_fn, axis=axis)


def maxpool3d(input: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    x = as_tensor(input)
    unbatched = x.ndim == 4
    x5 = x.data[None] if unbatched else x.data
    out, winners = maxpool3d_array(x5, kernel, stride, padding)

    def backward_fn(grad):
        g5 = grad[None] if unbatched else grad
        grad_x = maxpool3d_scatter(g5, winners, x5.shape, padding)
        return [grad_x[0] if unbatched else grad_x]

    return _result(out[0] if unbatched else out, OpKind.MAXPOOL, [x], backward_fn,
                   kernel=kernel, stride=stride, padding=padding)


def avgpool3d(input: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    x = as_tensor(input)
    unbatched = x.ndim == 4
    x5 = x.data[None] if unbatched else x.data
    out = avgpool3d_array(x5, kernel, stride)
    scale_factor = 1.0 / float(np.prod(triple(kernel)))

    def backward_fn(grad):
        g5 = grad[None] if unbatched else grad
        grad_x = avgpool3d_spread(g5 * scale_factor, x5.shape, kernel, stride)
        return [grad_x[0] if unbatched else grad_x]

    return _result(out[0] if unbatched else out, OpKind.AVGPOOL, [x], backward_fn,
                   kernel=kernel, stride=stride)


def concat(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in inputs]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(grad):
        return np.split(grad, bounds, axis=axis)

    return _result(out, OpKind.CONCAT, tensors, backward_fn, axis=axis)


def mul(a: Tensor, b: Tensor) -> Tensor:
    x, y = as_tensor(a), as_tensor(b)
    out = x.data * y.data

    def backward_fn(grad):
        return [_unbroadcast(grad * y.data, x.shape), _unbroadcast(grad * x.data, y.shape)]

    return _result(out, OpKind.MUL, [x, y], backward_fn)


def scale(factor: Tensor, vector: Tensor) -> Tensor:
    """Scalar-vector product along the last axis: factor (...,) times vector (..., M)"""
    a, v = as_tensor(factor), as_tensor(vector)
    if a.shape != v.shape[:-1]:
        raise ShapeError(f"scale factor shape {a.shape} does not match vector batch shape {v.shape[:-1]}")
    out = a.data[..., None] * v.data

    def backward_fn(grad):
        return [(grad * v.data).sum(axis=-1), grad * a.data[..., None]]

    return _result(out, OpKind.SCALE, [a, v], backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    x, y = as_tensor(a), as_tensor(b)
    out = x.data + y.data
    return _result(out, OpKind.ADD, [x, y],
                   lambda grad: [_unbroadcast(grad, x.shape), _unbroadcast(grad, y.shape)])


def reshape(input: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(input)
    out = x.data.reshape(tuple(shape))
    return _result(out, OpKind.RESHAPE, [x], lambda grad: [grad.reshape(x.shape)])


def select(input: Tensor, index) -> Tensor:
    x = as_tensor(input)
    out = np.array(x.data[index])

    def backward_fn(grad):
        full = np.zeros_like(x.data)
        full[index] += grad
        return [full]

    return _result(out, OpKind.SELECT, [x], backward_fn)


def total(input: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> Tensor:
    x = as_tensor(input)
    out = x.data.sum(axis=axis)

    def backward_fn(grad):
        if axis is None:
            return [np.broadcast_to(grad, x.shape).copy()]
        return [np.broadcast_to(np.expand_dims(grad, axis), x.shape).copy()]

    return _result(out, OpKind.SUM, [x], backward_fn)


def bce_with_logits(logits: Tensor, labels: ArrayLike, weights: Optional[ArrayLike] = None) -> Tensor:
    """
    Weighted binary cross-entropy on logits, averaged over the batch.

    loss = mean_i w_i * (softplus(f_i) - y_i f_i); gradient w_i (sigm(f_i) - y_i) / N
    """
    f = as_tensor(logits)
    y = np.asarray(labels, dtype=f.data.dtype).reshape(f.shape)
    w = np.ones_like(f.data) if weights is None else np.asarray(weights, dtype=f.data.dtype).reshape(f.shape)
    count = max(f.size, 1)
    out = np.sum(w * (np.logaddexp(0, f.data) - y * f.data)) / count

    def backward_fn(grad):
        return [grad * w * (expit(f.data) - y) / count]

    return _result(np.asarray(out), OpKind.BCE, [f], backward_fn)


# ============================================================================
# TNS1 BLOB CODEC
# ============================================================================

TENSOR_MAGIC = b"TNS1"


def encode_tensor(array: ArrayLike) -> bytes:
    """Magic "TNS1", u32 rank, u32 extents, float32 little-endian row-major payload"""
    values = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = TENSOR_MAGIC + struct.pack(f"<I{values.ndim}I", values.ndim, *values.shape)
    return header + values.tobytes()


def decode_tensor(blob: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """
    Decode one TNS1 blob starting at offset.

    Returns:
        (float32 array, offset just past the blob)

    Raises:
        DataError: Bad magic or truncated payload
    """
    if blob[offset:offset + 4] != TENSOR_MAGIC:
        raise DataError(f"Bad tensor blob magic at offset {offset}: {blob[offset:offset + 4]!r}")
    cursor = offset + 4
    if len(blob) < cursor + 4:
        raise DataError("Truncated tensor blob header")
    (rank,) = struct.unpack_from("<I", blob, cursor)
    cursor += 4
    if len(blob) < cursor + 4 * rank:
        raise DataError("Truncated tensor blob extents")
    extents = struct.unpack_from(f"<{rank}I", blob, cursor)
    cursor += 4 * rank
    count = int(np.prod(extents, dtype=np.int64))
    end = cursor + 4 * count
    if len(blob) < end:
        raise DataError(f"Truncated tensor blob payload: need {4 * count} bytes, have {len(blob) - cursor}")
    values = np.frombuffer(blob, dtype="<f4", count=count, offset=cursor).reshape(extents)
    return values.astype(np.float32), end
