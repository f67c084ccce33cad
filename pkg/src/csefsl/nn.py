"""Dense numeric core: layers, manual backprop, loss, SGD and the step-size schedule.

Tensors are plain ``float64`` numpy arrays whose first axis is the batch.
A parameter set is an ordered ``dict`` mapping ``"<layer index>.<name>"`` to
an array; insertion order follows the layer stack, so iteration order is
stable across runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, UsageError, DataError, NumericError

ParamSet = Dict[str, np.ndarray]

LAYER_KINDS = ("dense", "relu", "flatten", "conv2d")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and (self.in_features < 1 or self.out_features < 1):
            raise ConfigError("dense layer needs positive in/out features")
        if self.kind == "conv2d" and min(self.in_channels, self.out_channels,
                                         self.kernel, self.stride) < 1:
            raise ConfigError("conv2d needs positive channels, kernel and stride")

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def to_dict(self) -> dict:
        if self.kind == "dense":
            return {"kind": "dense", "in": self.in_features, "out": self.out_features}
        if self.kind == "conv2d":
            return {"kind": "conv2d", "in_channels": self.in_channels,
                    "out_channels": self.out_channels, "kernel": self.kernel,
                    "stride": self.stride}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        kind = d.pop("kind", None)
        try:
            if kind == "dense":
                spec = cls("dense", in_features=int(d.pop("in")), out_features=int(d.pop("out")))
            elif kind == "conv2d":
                spec = cls("conv2d", in_channels=int(d.pop("in_channels")),
                           out_channels=int(d.pop("out_channels")),
                           kernel=int(d.pop("kernel")), stride=int(d.pop("stride", 1)))
            else:
                spec = cls(kind)
        except KeyError as e:
            raise ConfigError(f"{kind} layer is missing field {e.args[0]!r}") from None
        if d:
            raise ConfigError(f"unknown fields for {kind} layer: {sorted(d)}")
        return spec


def dense(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("dense", in_features=in_features, out_features=out_features)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def conv2d(in_channels: int, out_channels: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride)


def layer_output_shape(layer: LayerSpec, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
    """Per-example output shape of ``layer``; raises ValueError if it cannot chain."""
    if layer.kind == "dense":
        if in_shape != (layer.in_features,):
            raise ValueError(f"dense expects ({layer.in_features},), got {in_shape}")
        return (layer.out_features,)
    if layer.kind == "relu":
        return in_shape
    if layer.kind == "flatten":
        return (int(np.prod(in_shape)),)
    if len(in_shape) != 3 or in_shape[0] != layer.in_channels:
        raise ValueError(f"conv2d expects ({layer.in_channels}, H, W), got {in_shape}")
    _, h, w = in_shape
    if h < layer.kernel or w < layer.kernel:
        raise ValueError(f"conv2d kernel {layer.kernel} larger than input {h}x{w}")
    return (layer.out_channels, (h - layer.kernel) // layer.stride + 1,
            (w - layer.kernel) // layer.stride + 1)


def infer_shapes(stack: Sequence[LayerSpec], in_shape: Sequence[int],
                 where: str = "stack") -> List[Tuple[int, ...]]:
    """Return the per-example shapes [input, after layer 0, ..., after layer n-1]."""
    shapes = [tuple(int(s) for s in in_shape)]
    for i, layer in enumerate(stack):
        try:
            shapes.append(layer_output_shape(layer, shapes[-1]))
        except ValueError as e:
            raise ConfigError(f"{where} layer {i} ({layer.kind}): {e}") from None
    return shapes


def init_params(stack: Sequence[LayerSpec], rng: np.random.Generator) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    params: ParamSet = {}
    for i, layer in enumerate(stack):
        if layer.kind == "dense":
            fan_in, fan_out = layer.in_features, layer.out_features
            shape = (layer.out_features, layer.in_features)
            nbias = layer.out_features
        elif layer.kind == "conv2d":
            k2 = layer.kernel * layer.kernel
            fan_in, fan_out = layer.in_channels * k2, layer.out_channels * k2
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            nbias = layer.out_channels
        else:
            continue
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"{i}.weight"] = rng.uniform(-limit, limit, size=shape)
        params[f"{i}.bias"] = np.zeros(nbias)
    return params


def param_names(stack: Sequence[LayerSpec]) -> List[str]:
    names = []
    for i, layer in enumerate(stack):
        if layer.has_params:
            names += [f"{i}.weight", f"{i}.bias"]
    return names


class ForwardTrace:
    """Per-layer cached inputs from one forward pass; single use."""

    __slots__ = ("inputs", "n_layers", "consumed")

    def __init__(self, inputs: List[np.ndarray], n_layers: int):
        self.inputs = inputs
        self.n_layers = n_layers
        self.consumed = False

    def __len__(self):
        return len(self.inputs)


def _conv_forward(x, w, b, stride):
    k = w.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("nchwij,ocij->nohw", win, w, optimize=True) + b[None, :, None, None]


def _conv_backward(x, w, g, stride):
    k = w.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    dw = np.einsum("nohw,nchwij->ocij", g, win, optimize=True)
    db = g.sum(axis=(0, 2, 3))
    dcols = np.einsum("nohw,ocij->nchwij", g, w, optimize=True)
    dx = np.zeros_like(x)
    ho, wo = g.shape[2], g.shape[3]
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * (ho - 1) + 1:stride,
               j:j + stride * (wo - 1) + 1:stride] += dcols[..., i, j]
    return dw, db, dx


def forward(stack: Sequence[LayerSpec], params: ParamSet,
            x: np.ndarray) -> Tuple[np.ndarray, ForwardTrace]:
    """Run ``x`` (batch-first) through ``stack``; returns output and a trace for backward."""
    cache = []
    for i, layer in enumerate(stack):
        cache.append(x)
        kind = layer.kind
        if kind == "dense":
            if x.ndim != 2 or x.shape[1] != layer.in_features:
                raise ConfigError(f"layer {i} (dense): expected input (batch, {layer.in_features}),"
                                  f" got {x.shape}")
            try:
                x = x @ params[f"{i}.weight"].T + params[f"{i}.bias"]
            except KeyError as e:
                raise UsageError(f"missing parameter {e.args[0]!r}") from None
        elif kind == "relu":
            x = np.maximum(x, 0.0)
        elif kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        else:
            if x.ndim != 4 or x.shape[1] != layer.in_channels:
                raise ConfigError(f"layer {i} (conv2d): expected input (batch, "
                                  f"{layer.in_channels}, H, W), got {x.shape}")
            try:
                w, b = params[f"{i}.weight"], params[f"{i}.bias"]
            except KeyError as e:
                raise UsageError(f"missing parameter {e.args[0]!r}") from None
            x = _conv_forward(x, w, b, layer.stride)
    return x, ForwardTrace(cache, len(stack))


def backward(stack: Sequence[LayerSpec], params: ParamSet, trace: ForwardTrace,
             upstream: np.ndarray) -> Tuple[ParamSet, np.ndarray]:
    """Backpropagate ``upstream`` (d loss / d output) through the stack.

    Returns the parameter gradients (same names/order as ``params`` restricted to
    the stack) and the gradient with respect to the stack input. The trace is
    invalidated.
    """
    if trace.consumed:
        raise UsageError("forward trace was already consumed by a backward pass")
    if trace.n_layers != len(stack):
        raise UsageError(f"trace has {trace.n_layers} layers, stack has {len(stack)}")
    trace.consumed = True
    g = upstream
    grads = {}
    for i in range(len(stack) - 1, -1, -1):
        layer, x = stack[i], trace.inputs[i]
        kind = layer.kind
        if kind == "dense":
            w = params[f"{i}.weight"]
            grads[f"{i}.bias"] = g.sum(axis=0)
            grads[f"{i}.weight"] = g.T @ x
            g = g @ w
        elif kind == "relu":
            g = g * (x > 0)
        elif kind == "flatten":
            g = g.reshape(x.shape)
        else:
            dw, db, g = _conv_backward(x, params[f"{i}.weight"], g, layer.stride)
            grads[f"{i}.bias"] = db
            grads[f"{i}.weight"] = dw
    trace.inputs = []
    ordered = {name: grads[name] for name in params if name in grads}
    return ordered, g


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Batch-mean cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise UsageError(f"{n} logit rows but labels shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label out of range [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sums = exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(np.mean(np.log(sums[:, 0]) - shifted[rows, labels]))
    d = exp / sums
    d[rows, labels] -= 1.0
    d /= n
    return loss, d


def check_compatible(a: ParamSet, b: ParamSet) -> None:
    if list(a) != list(b):
        raise UsageError(f"parameter names differ: {list(a)} vs {list(b)}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise UsageError(f"shape mismatch for {k}: {a[k].shape} vs {b[k].shape}")


def sgd_step(params: ParamSet, grads: ParamSet, eta: float) -> ParamSet:
    """Return ``params - eta * grads``; the inputs are left untouched."""
    if not eta > 0:
        raise UsageError(f"learning rate must be positive, got {eta}")
    check_compatible(params, grads)
    out = {k: params[k] - eta * grads[k] for k in params}
    for k, v in out.items():
        if not np.isfinite(v).all():
            raise NumericError(f"non-finite values in {k} after SGD step")
    return out


def global_norm(grads: ParamSet) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def sq_norm(grads: ParamSet) -> float:
    return sum(float(np.vdot(g, g)) for g in grads.values())


def clip_by_global_norm(grads: ParamSet, threshold: float) -> ParamSet:
    if not threshold > 0:
        raise UsageError("clip threshold must be positive")
    n = global_norm(grads)
    if n <= threshold:
        return dict(grads)
    scale = threshold / n
    return {k: g * scale for k, g in grads.items()}


def add(a: ParamSet, b: ParamSet) -> ParamSet:
    check_compatible(a, b)
    return {k: a[k] + b[k] for k in a}


def scale(a: ParamSet, c: float) -> ParamSet:
    return {k: v * c for k, v in a.items()}


def copy_params(a: ParamSet) -> ParamSet:
    return {k: v.copy() for k, v in a.items()}


def params_equal(a: ParamSet, b: ParamSet) -> bool:
    """Bit-exact equality (names, order, shapes and values)."""
    return list(a) == list(b) and all(np.array_equal(a[k], b[k]) for k in a)


def size(params: Optional[ParamSet], bytes_per_element: int = 4) -> Tuple[int, int]:
    """(element count, wire bytes) of a parameter set."""
    count = sum(int(v.size) for v in (params or {}).values())
    return count, count * bytes_per_element


@dataclass(frozen=True)
class LrSchedule:
    """Diminishing step size eta0 / (1 + t)."""
    eta0: float

    def __post_init__(self):
        if not self.eta0 > 0:
            raise ConfigError("eta0 must be positive")

    def __call__(self, t: int) -> float:
        return lr_at(self, t)


def lr_at(schedule: LrSchedule, t: int) -> float:
    if t < 0:
        raise UsageError("round index must be nonnegative")
    return schedule.eta0 / (1 + t)


def central_difference(f: Callable[[ParamSet], float], params: ParamSet,
                       epsilon: float = 1e-5) -> ParamSet:
    """Central-difference gradient of a scalar function of a parameter set."""
    work = copy_params(params)
    out = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            fp = f(work)
            flat[j] = orig - epsilon
            fm = f(work)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2 * epsilon)
        out[name] = g
    return out


def finite_diff_grad(stack: Sequence[LayerSpec], params: ParamSet, x: np.ndarray,
                     labels: np.ndarray, epsilon: float = 1e-5) -> ParamSet:
    """Finite-difference gradient of the cross-entropy loss of ``stack`` on (x, labels)."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise UsageError("epsilon must lie in [1e-7, 1e-3]")

    def loss(p):
        return softmax_cross_entropy(forward(stack, p, x)[0], labels)[0]

    return central_difference(loss, params, epsilon)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise then maximised."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
