"""Small residual classifier and its conversion into an aggregation backbone."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import tensor as ops
from .errors import ConfigError, DimensionError, ZooIncompatibleError
from .layers import AdaAggLayer, Binder, TEState, adaagg_forward, bn_init_average, new_adaagg_layer
from .tensor import Graph, Node, Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
HEAD_NAMES = ("head.weight", "head.bias")


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    stem_channels: int = 16
    stages: tuple[tuple[int, int], ...] = ((2, 16), (2, 32))
    classes: int = 8
    side: int = 16
    align_pointwise: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages))
        if not self.stages:
            raise ConfigError("at least one stage is required")
        sizes = [self.in_channels, self.stem_channels, self.classes, self.side]
        sizes += [v for s in self.stages for v in s]
        if any(int(v) < 1 for v in sizes):
            raise ConfigError(f"all sizes must be positive: {self}")
        if self.classes < 2:
            raise ConfigError("a classifier needs at least 2 classes")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        d = dict(d)
        d["stages"] = tuple(tuple(s) for s in d.get("stages", cls.stages))
        return cls(**d)

    def digest(self) -> str:
        """Hash of everything that fixes the backbone tensors (head excluded)."""
        body = {k: v for k, v in self.to_dict().items() if k not in ("classes", "align_pointwise")}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ConvSpec:
    name: str
    c_in: int
    c_out: int
    k: int
    stride: int
    padding: int
    side_in: int

    @property
    def side_out(self) -> int:
        return (self.side_in + 2 * self.padding - self.k) // self.stride + 1


@dataclass(frozen=True)
class BlockSpec:
    prefix: str
    conv1: ConvSpec
    conv2: ConvSpec
    shortcut: ConvSpec | None


def block_specs(config: BackboneConfig) -> tuple[ConvSpec, list[BlockSpec]]:
    """Static layer geometry of the backbone: stem conv and residual blocks."""
    side = config.side
    stem = ConvSpec("stem.conv", config.in_channels, config.stem_channels, 3, 1, 1, side)
    blocks = []
    c_in = config.stem_channels
    for s, (nblocks, c_out) in enumerate(config.stages):
        for b in range(nblocks):
            stride = 2 if (s > 0 and b == 0) else 1
            prefix = f"s{s}.b{b}"
            conv1 = ConvSpec(f"{prefix}.conv1", c_in, c_out, 3, stride, 1, side)
            side = conv1.side_out
            conv2 = ConvSpec(f"{prefix}.conv2", c_out, c_out, 3, 1, 1, side)
            shortcut = None
            if stride != 1 or c_in != c_out:
                shortcut = ConvSpec(f"{prefix}.short.conv", c_in, c_out, 1, stride, 0, conv1.side_in)
            blocks.append(BlockSpec(prefix, conv1, conv2, shortcut))
            c_in = c_out
    return stem, blocks


def conv_specs(config: BackboneConfig) -> list[ConvSpec]:
    stem, blocks = block_specs(config)
    out = [stem]
    for blk in blocks:
        out += [blk.conv1, blk.conv2] + ([blk.shortcut] if blk.shortcut else [])
    return out


def bn_name(conv_name: str) -> str:
    """``s0.b0.conv1`` -> ``s0.b0.bn1``; ``stem.conv`` -> ``stem.bn``."""
    head, _, last = conv_name.rpartition(".")
    return f"{head}.{last.replace('conv', 'bn')}"


@dataclass
class PlainConv:
    name: str
    weight: Tensor
    stride: int
    padding: int

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        yield "weight", self.weight


@dataclass
class BatchNorm:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS


@dataclass
class Model:
    """A residual classifier whose convolutions are plain or aggregation layers."""

    config: BackboneConfig
    convs: dict[str, PlainConv | AdaAggLayer]
    bns: dict[str, BatchNorm]
    head_weight: Tensor
    head_bias: Tensor
    frozen: set[str] = field(default_factory=set)

    @property
    def is_zoo(self) -> bool:
        return any(isinstance(c, AdaAggLayer) for c in self.convs.values())

    @property
    def m(self) -> int:
        ms = {c.m for c in self.convs.values() if isinstance(c, AdaAggLayer)}
        if len(ms) > 1:
            raise DimensionError(f"aggregation layers disagree on zoo size: {sorted(ms)}")
        return ms.pop() if ms else 0

    @property
    def dtype(self):
        return self.head_weight.dtype

    def adaagg_layers(self) -> list[AdaAggLayer]:
        return [c for c in self.convs.values() if isinstance(c, AdaAggLayer)]

    def named_params(self) -> dict[str, Tensor]:
        """Trainable arrays by stable name (frozen names excluded)."""
        out = {}
        for name, conv in self.convs.items():
            for pname, arr in conv.named_params():
                out[f"{name}.{pname}"] = arr
        for name, bn in self.bns.items():
            out[f"{name}.gamma"] = bn.gamma
            out[f"{name}.beta"] = bn.beta
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return {k: v for k, v in out.items() if k not in self.frozen}

    def state(self, include_head: bool = True) -> dict[str, Tensor]:
        """Every array the model holds, including unused gates and alignments."""
        out = {}
        for name, conv in self.convs.items():
            if isinstance(conv, PlainConv):
                out[f"{name}.weight"] = conv.weight
                continue
            for i in range(conv.m):
                out[f"{name}.src{i}.weight"] = conv.sources[i]
                if conv.biases is not None:
                    out[f"{name}.src{i}.bias"] = conv.biases[i]
                out[f"{name}.align{i}"] = conv.alignments[i]
                for pname, arr in conv.gates[i].named_params():
                    out[f"{name}.gate{i}.{pname}"] = arr
        for name, bn in self.bns.items():
            out[f"{name}.gamma"] = bn.gamma
            out[f"{name}.beta"] = bn.beta
            out[f"{name}.running_mean"] = bn.running_mean
            out[f"{name}.running_var"] = bn.running_var
        if include_head:
            out["head.weight"] = self.head_weight
            out["head.bias"] = self.head_bias
        return out

    def load_state(self, tensors: Mapping[str, Tensor]) -> None:
        """Copy arrays into the model in place; names and shapes must match exactly."""
        mine = self.state(include_head="head.weight" in tensors)
        missing = sorted(set(mine) - set(tensors))
        extra = sorted(set(tensors) - set(mine))
        if missing or extra:
            raise ZooIncompatibleError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, arr in mine.items():
            src = np.asarray(tensors[name])
            if src.shape != arr.shape:
                raise ZooIncompatibleError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        out = self.clone()
        _cast_inplace(out, dtype)
        return out

    def forward(
        self,
        g: Graph,
        x,
        training: bool,
        te: TEState | None = None,
        bind: Callable[[str, Tensor], Node] | None = None,
    ) -> Node:
        x = x if isinstance(x, Node) else g.constant(np.asarray(x, dtype=self.dtype))
        if x.value.ndim != 4 or x.shape[1:] != (self.config.in_channels, self.config.side, self.config.side):
            raise DimensionError(
                f"expected input [N,{self.config.in_channels},{self.config.side},{self.config.side}],"
                f" got {x.shape}"
            )
        if bind is None:
            trainable = self.named_params()
            bind = Binder(g, lambda n: n in trainable)
        stem, blocks = block_specs(self.config)

        def conv_bn(spec: ConvSpec, feat: Node) -> Node:
            feat = self._conv(spec.name, feat, training, te, bind)
            bn = self.bns[bn_name(spec.name)]
            name = bn_name(spec.name)
            return ops.batch_norm(feat, bind(f"{name}.gamma", bn.gamma), bind(f"{name}.beta", bn.beta),
                                bn.running_mean, bn.running_var, training, bn.momentum, bn.eps)

        feat = ops.relu(conv_bn(stem, x))
        for blk in blocks:
            out = ops.relu(conv_bn(blk.conv1, feat))
            out = conv_bn(blk.conv2, out)
            short = conv_bn(blk.shortcut, feat) if blk.shortcut else feat
            feat = ops.relu(ops.add(out, short))
        n, c = feat.shape[:2]
        pooled = ops.reshape(ops.global_avg_pool(feat), (n, c))
        with ops.mac_scope("head"):
            return ops.affine(pooled, bind("head.weight", self.head_weight), bind("head.bias", self.head_bias))

    def _conv(self, name, feat, training, te, bind) -> Node:
        conv = self.convs[name]
        if isinstance(conv, PlainConv):
            with ops.mac_scope(name):
                return ops.conv2d(feat, bind(f"{name}.weight", conv.weight), None, conv.stride, conv.padding)
        mode = None
        if te is not None and not training:
            mode = "frozen"
        elif conv.gate_mode == "batch_average" and not training:
            mode = "frozen" if te is not None else "per_sample"
        elif conv.gate_mode == "frozen" and training:
            raise ValueError(f"{name}: frozen layers cannot be trained")
        return adaagg_forward(conv, feat, te, training=training, bind=bind, gate_mode=mode)


def _cast_inplace(model: Model, dtype) -> None:
    for conv in model.convs.values():
        if isinstance(conv, PlainConv):
            conv.weight = conv.weight.astype(dtype)
            continue
        conv.sources = [w.astype(dtype) for w in conv.sources]
        conv.alignments = [t.astype(dtype) for t in conv.alignments]
        if conv.biases is not None:
            conv.biases = [b.astype(dtype) for b in conv.biases]
        for gate in conv.gates:
            gate.reduce_weight = gate.reduce_weight.astype(dtype)
            gate.reduce_bias = gate.reduce_bias.astype(dtype)
            gate.expand_weight = gate.expand_weight.astype(dtype)
            gate.expand_bias = gate.expand_bias.astype(dtype)
    for bn in model.bns.values():
        bn.gamma, bn.beta = bn.gamma.astype(dtype), bn.beta.astype(dtype)
        bn.running_mean, bn.running_var = bn.running_mean.astype(dtype), bn.running_var.astype(dtype)
    model.head_weight = model.head_weight.astype(dtype)
    model.head_bias = model.head_bias.astype(dtype)


def init_head(config: BackboneConfig, seed: int, dtype=np.float32) -> tuple[Tensor, Tensor]:
    """Fresh classifier head; depends only on (config, seed)."""
    rng = np.random.default_rng([seed, 7])
    d_in = config.stages[-1][1]
    bound = 1.0 / np.sqrt(d_in)
    weight = rng.uniform(-bound, bound, size=(config.classes, d_in)).astype(dtype)
    return weight, np.zeros(config.classes, dtype=dtype)


def _new_bn(c: int, dtype) -> BatchNorm:
    return BatchNorm(np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype))


def build_plain_backbone(config: BackboneConfig, seed: int, dtype=np.float32) -> Model:
    """Seeded He-normal convolutions, unit batch norms and a uniform head."""
    if not isinstance(config, BackboneConfig):
        raise ConfigError("config must be a BackboneConfig")
    rng = np.random.default_rng([seed, 1])
    convs, bns = {}, {}
    for spec in conv_specs(config):
        std = np.sqrt(2.0 / (spec.c_in * spec.k * spec.k))
        w = rng.normal(0.0, std, size=(spec.c_out, spec.c_in, spec.k, spec.k)).astype(dtype)
        convs[spec.name] = PlainConv(spec.name, w, spec.stride, spec.padding)
        bns[bn_name(spec.name)] = _new_bn(spec.c_out, dtype)
    hw, hb = init_head(config, seed, dtype)
    return Model(config, convs, bns, hw, hb)


def backbone_shapes(config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every non-head tensor of a plain backbone."""
    out = {}
    for spec in conv_specs(config):
        out[f"{spec.name}.weight"] = (spec.c_out, spec.c_in, spec.k, spec.k)
        bn = bn_name(spec.name)
        for p in ("gamma", "beta", "running_mean", "running_var"):
            out[f"{bn}.{p}"] = (spec.c_out,)
    return out


def check_zoo(config: BackboneConfig, zoo: Sequence[Mapping[str, Tensor]], digests: Sequence[str | None] = ()) -> None:
    """Raise :class:`ZooIncompatibleError` unless every checkpoint fits ``config``."""
    if not zoo:
        raise ZooIncompatibleError("the zoo is empty")
    want = config.digest()
    for i, d in enumerate(digests):
        if d is not None and d != want:
            raise ZooIncompatibleError(f"source {i}: backbone digest {d} != {want}")
    expected = backbone_shapes(config)
    for i, tensors in enumerate(zoo):
        for name, shape in expected.items():
            if name not in tensors:
                raise ZooIncompatibleError(f"source {i}: missing parameter {name}")
            if tuple(np.shape(tensors[name])) != shape:
                raise ZooIncompatibleError(
                    f"source {i}: parameter {name} has shape {tuple(np.shape(tensors[name]))}, expected {shape}"
                )
        extra = sorted(set(tensors) - set(expected) - set(HEAD_NAMES))
        if extra:
            raise ZooIncompatibleError(f"source {i}: unexpected parameter {extra[0]}")


def plain_from_state(config: BackboneConfig, tensors: Mapping[str, Tensor], seed: int = 0, dtype=None) -> Model:
    """Plain backbone carrying ``tensors``; a missing head is freshly initialized from ``seed``."""
    check_zoo(config, [tensors])
    dtype = dtype or np.asarray(tensors["stem.conv.weight"]).dtype
    model = build_plain_backbone(config, seed, dtype)
    has_head = all(n in tensors for n in HEAD_NAMES)
    if has_head and tuple(np.shape(tensors["head.weight"])) != model.head_weight.shape:
        has_head = False
    state = {k: np.asarray(v) for k, v in tensors.items() if has_head or k not in HEAD_NAMES}
    model.load_state(state)
    return model


def convert_to_zoo(
    config: BackboneConfig,
    zoo: Sequence[Mapping[str, Tensor]],
    seed: int = 0,
    *,
    align: bool = True,
    gate_mode: str = "per_sample",
    dtype=None,
    digests: Sequence[str | None] = (),
) -> Model:
    """Turn every convolution into an aggregation layer over the ``m`` checkpoints.

    Spatial kernels get alignment when ``align``; 1x1 shortcut kernels only when
    ``config.align_pointwise`` as well.  Batch norms start from the source mean
    and the head is freshly initialized from ``seed``.
    """
    check_zoo(config, zoo, digests)
    dtype = dtype or np.asarray(zoo[0]["stem.conv.weight"]).dtype
    rng = np.random.default_rng([seed, 3])
    convs, bns = {}, {}
    for spec in conv_specs(config):
        key = f"{spec.name}.weight"
        sources = [np.asarray(z[key], dtype=dtype) for z in zoo]
        aligned = align and (spec.k > 1 or config.align_pointwise)
        convs[spec.name] = new_adaagg_layer(
            spec.name, sources, rng, stride=spec.stride, padding=spec.padding,
            align_enabled=aligned, gate_mode=gate_mode,
        )
        bn = bn_name(spec.name)
        params = [
            tuple(np.asarray(z[f"{bn}.{p}"], dtype=dtype) for p in ("gamma", "beta", "running_mean", "running_var"))
            for z in zoo
        ]
        bns[bn] = BatchNorm(*(np.ascontiguousarray(a, dtype=dtype) for a in bn_init_average(params)))
    hw, hb = init_head(config, seed, dtype)
    return Model(config, convs, bns, hw, hb)


def model_forward(model: Model, batch, mode: str = "eval", te: TEState | None = None) -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    g = Graph()
    return model.forward(g, batch, training=(mode == "train"), te=te).value
