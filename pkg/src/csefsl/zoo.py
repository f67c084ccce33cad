"""Split-model descriptions: client stack | cut | server stack, plus an optional auxiliary head."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .errors import ConfigError
from .nn import LayerSpec, ParamSet
from .seeding import substream

AUX_SHARE_WARN = 0.10


@dataclass(frozen=True)
class SplitModelSpec:
    input_shape: Tuple[int, ...]
    client_stack: Tuple[LayerSpec, ...]
    server_stack: Tuple[LayerSpec, ...]
    num_classes: int
    aux_head: Optional[Tuple[LayerSpec, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "client_stack", tuple(self.client_stack))
        object.__setattr__(self, "server_stack", tuple(self.server_stack))
        if self.aux_head is not None:
            object.__setattr__(self, "aux_head", tuple(self.aux_head) or None)
        self.validate()

    def validate(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if not self.client_stack or not self.server_stack:
            raise ConfigError("client and server stacks must both be non-empty")
        cut = nn.infer_shapes(self.client_stack, self.input_shape, "client")[-1]
        out = nn.infer_shapes(self.server_stack, cut, "server")[-1]
        if out != (self.num_classes,):
            raise ConfigError(f"server stack ends in {out}, expected ({self.num_classes},) logits")
        if self.aux_head is not None:
            aux_out = nn.infer_shapes(self.aux_head, cut, "aux")[-1]
            if aux_out != (self.num_classes,):
                raise ConfigError(f"aux head ends in {aux_out}, expected ({self.num_classes},) logits")
            share = self.aux_share()
            if share > AUX_SHARE_WARN:
                warnings.warn(f"auxiliary head holds {share:.1%} of all parameters", stacklevel=3)

    @property
    def cut_shape(self) -> Tuple[int, ...]:
        return nn.infer_shapes(self.client_stack, self.input_shape)[-1]

    @property
    def has_aux(self) -> bool:
        return self.aux_head is not None

    def param_counts(self) -> Tuple[int, int, int]:
        """(|x_c|, |a_c|, |x_s|) by the per-layer formula, without allocating."""
        return (stack_param_count(self.client_stack),
                stack_param_count(self.aux_head or ()),
                stack_param_count(self.server_stack))

    def aux_share(self) -> float:
        c, a, s = self.param_counts()
        return a / (c + a + s)

    def to_dict(self) -> dict:
        d = {"input_shape": list(self.input_shape),
             "client": [l.to_dict() for l in self.client_stack],
             "server": [l.to_dict() for l in self.server_stack],
             "num_classes": self.num_classes}
        d["aux"] = None if self.aux_head is None else [l.to_dict() for l in self.aux_head]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SplitModelSpec":
        aux = d.get("aux")
        return cls(input_shape=tuple(d["input_shape"]),
                   client_stack=tuple(LayerSpec.from_dict(l) for l in d["client"]),
                   server_stack=tuple(LayerSpec.from_dict(l) for l in d["server"]),
                   num_classes=int(d["num_classes"]),
                   aux_head=None if aux is None else tuple(LayerSpec.from_dict(l) for l in aux))


def stack_param_count(stack: Sequence[LayerSpec]) -> int:
    total = 0
    for layer in stack:
        if layer.kind == "dense":
            total += layer.in_features * layer.out_features + layer.out_features
        elif layer.kind == "conv2d":
            total += (layer.in_channels * layer.kernel ** 2 + 1) * layer.out_channels
    return total


def aux_head(kind: str, cut_shape: Sequence[int], num_classes: int,
             hidden: Sequence[int] = (), channels: Optional[int] = None) -> Tuple[LayerSpec, ...]:
    """Build an auxiliary head of kind ``mlp`` or ``conv1x1_mlp``.

    ``conv1x1_mlp`` reduces the channel count with a 1x1 convolution before the
    MLP and needs a (C, H, W) cut shape.
    """
    cut_shape = tuple(cut_shape)
    layers: List[LayerSpec] = []
    if kind == "conv1x1_mlp":
        if len(cut_shape) != 3 or channels is None:
            raise ConfigError("conv1x1_mlp needs a (C, H, W) cut and an output channel count")
        layers += [nn.conv2d(cut_shape[0], channels, 1), nn.relu()]
        cut_shape = (channels,) + cut_shape[1:]
    elif kind != "mlp":
        raise ConfigError(f"unknown aux head kind {kind!r}")
    width = int(np.prod(cut_shape))
    if len(cut_shape) > 1:
        layers.append(nn.flatten())
    for h in hidden:
        layers += [nn.dense(width, h), nn.relu()]
        width = h
    layers.append(nn.dense(width, num_classes))
    return tuple(layers)


def toy_spec(n_features: int, num_classes: int, hidden: int = 32,
             with_aux: bool = True) -> SplitModelSpec:
    """dense(hidden)+relu | cut | dense(hidden)+relu+dense(K), aux = dense(K)."""
    return SplitModelSpec(
        input_shape=(n_features,),
        client_stack=(nn.dense(n_features, hidden), nn.relu()),
        server_stack=(nn.dense(hidden, hidden), nn.relu(), nn.dense(hidden, num_classes)),
        num_classes=num_classes,
        aux_head=(nn.dense(hidden, num_classes),) if with_aux else None,
    )


def build(spec: SplitModelSpec, seed: int,
          require_aux: bool = False) -> Tuple[ParamSet, Optional[ParamSet], ParamSet]:
    """Initial (client, aux, server) parameters; aux is None when the spec has no head.

    Each part draws from its own substream of ``seed``.
    """
    if require_aux and not spec.has_aux:
        raise ConfigError("strategy needs an auxiliary head but the model spec has none")
    client = nn.init_params(spec.client_stack, substream(seed, "client-init"))
    server = nn.init_params(spec.server_stack, substream(seed, "server-init"))
    aux = None
    if spec.has_aux:
        aux = nn.init_params(spec.aux_head, substream(seed, "aux-init"))
    return client, aux, server


def fuse(spec: SplitModelSpec) -> List[LayerSpec]:
    return list(spec.client_stack) + list(spec.server_stack)


def fuse_params(spec: SplitModelSpec, client: ParamSet, server: ParamSet) -> ParamSet:
    """Rename client/server parameters into the index space of ``fuse(spec)``."""
    offset = len(spec.client_stack)
    fused = dict(client)
    for name, v in server.items():
        idx, rest = name.split(".", 1)
        fused[f"{int(idx) + offset}.{rest}"] = v
    return fused


def split_params(spec: SplitModelSpec, fused: ParamSet) -> Tuple[ParamSet, ParamSet]:
    offset = len(spec.client_stack)
    client, server = {}, {}
    for name, v in fused.items():
        idx, rest = name.split(".", 1)
        if int(idx) < offset:
            client[name] = v
        else:
            server[f"{int(idx) - offset}.{rest}"] = v
    return client, server


def smashed_size(spec: SplitModelSpec, batch_size: int, bytes_per_element: int = 4,
                 label_bytes: int = 1) -> Tuple[int, int]:
    """(activation element count, wire bytes incl. labels) of one batch's smashed upload."""
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    count = batch_size * int(np.prod(spec.cut_shape))
    return count, count * bytes_per_element + batch_size * label_bytes
