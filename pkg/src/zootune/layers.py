"""Adaptive aggregation of zoo parameters.

An :class:`AdaAggLayer` holds ``m`` copies of one convolution's weights (one
per source model), an output-channel alignment matrix per copy, and a small
gating network per copy.  Its effective kernel is

    W_hat = sum_i a_i * (T_i @ W_i)

where ``a_i`` is the sigmoid output of gate ``i`` evaluated on the layer
input.  :class:`TEState` keeps an exponential moving average of batch-mean
gate values so a trained layer can be collapsed into one plain kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as ops
from .errors import DimensionError, StateError
from .tensor import Graph, Node, Tensor

GATE_MODES = ("per_sample", "batch_average", "frozen", "uniform")
SQUEEZE_RATIO = 16
MIN_GATE_HIDDEN = 4
SINGLE_SOURCE_GATE = 0.999
# largest |logit| whose sigmoid still rounds strictly inside (0, 1)
GATE_LOGIT_BOUND = {np.dtype(np.float32): 15.0, np.dtype(np.float64): 36.0}


def gate_hidden_width(c_in: int) -> int:
    return max(math.ceil(c_in / SQUEEZE_RATIO), MIN_GATE_HIDDEN)


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass
class GatingNet:
    """GAP -> 1x1 reduce -> relu -> 1x1 expand -> sigmoid, stored as dense matrices."""

    reduce_weight: Tensor  # [hidden, C_in]
    reduce_bias: Tensor  # [hidden]
    expand_weight: Tensor  # [1, hidden]
    expand_bias: Tensor  # [1]

    @property
    def hidden(self) -> int:
        return self.reduce_weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.reduce_weight.shape[1]

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        yield "reduce.weight", self.reduce_weight
        yield "reduce.bias", self.reduce_bias
        yield "expand.weight", self.expand_weight
        yield "expand.bias", self.expand_bias


def new_gate(c_in: int, m: int, rng: np.random.Generator, dtype=np.float64) -> GatingNet:
    """Gate whose output is exactly ``1/m`` for every input (0.999 when m == 1)."""
    hidden = gate_hidden_width(c_in)
    reduce_w = rng.normal(0.0, math.sqrt(2.0 / c_in), size=(hidden, c_in)).astype(dtype)
    p = SINGLE_SOURCE_GATE if m == 1 else 1.0 / m
    return GatingNet(
        reduce_weight=reduce_w,
        reduce_bias=np.zeros(hidden, dtype=dtype),
        expand_weight=np.zeros((1, hidden), dtype=dtype),
        expand_bias=np.full(1, logit(p), dtype=dtype),
    )


def _gate_node(gate: GatingNet, pooled: Node, bind: Callable[[str, Tensor], Node], prefix: str) -> Node:
    z = ops.affine(pooled, bind(f"{prefix}.reduce.weight", gate.reduce_weight),
                 bind(f"{prefix}.reduce.bias", gate.reduce_bias))
    z = ops.relu(z)
    z = ops.affine(z, bind(f"{prefix}.expand.weight", gate.expand_weight),
                 bind(f"{prefix}.expand.bias", gate.expand_bias))
    bound = GATE_LOGIT_BOUND[np.dtype(z.value.dtype)]
    return ops.sigmoid(ops.clip(z, -bound, bound))


def gate_forward(gate: GatingNet, feat: Tensor) -> Tensor:
    """Gate value for every sample of ``feat`` [N,C_in,H,W]; returns shape [N]."""
    feat = np.asarray(feat)
    if feat.ndim != 4 or feat.shape[1] != gate.c_in:
        raise DimensionError(f"gate expects {gate.c_in} input channels, got input {feat.shape}")
    g = Graph()
    pooled = ops.reshape(ops.global_avg_pool(g.constant(feat)), feat.shape[:2])
    out = _gate_node(gate, pooled, lambda _n, arr: g.constant(arr), "gate")
    return out.value[:, 0]


def align_weights(mix: Tensor, weight: Tensor) -> Tensor:
    """Recombine output channels: ``out[o] = sum_q mix[o, q] * weight[q]``."""
    cout = weight.shape[0]
    if mix.shape != (cout, cout):
        raise DimensionError(f"alignment {mix.shape} does not match weight {weight.shape}")
    return (mix @ weight.reshape(cout, -1)).reshape(weight.shape)


@dataclass
class AdaAggLayer:
    name: str
    sources: list[Tensor]
    alignments: list[Tensor]
    gates: list[GatingNet]
    biases: list[Tensor] | None = None
    stride: int = 1
    padding: int = 0
    gate_mode: str = "per_sample"
    align_enabled: bool = True
    last_gate_means: Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        m = len(self.sources)
        if m < 1:
            raise DimensionError("an aggregation layer needs at least one source")
        shape = self.sources[0].shape
        if any(w.shape != shape for w in self.sources):
            raise DimensionError(f"{self.name}: source weights differ in shape")
        if len(self.alignments) != m or len(self.gates) != m:
            raise DimensionError(f"{self.name}: sources, alignments and gates must all have length {m}")
        if any(t.shape != (shape[0], shape[0]) for t in self.alignments):
            raise DimensionError(f"{self.name}: alignments must be {shape[0]}x{shape[0]}")
        if self.biases is not None and (
            len(self.biases) != m or any(b.shape != (shape[0],) for b in self.biases)
        ):
            raise DimensionError(f"{self.name}: per-source biases must be [{shape[0]}] each")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"unknown gate mode {self.gate_mode!r}")

    @property
    def m(self) -> int:
        return len(self.sources)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return self.sources[0].shape

    @property
    def dtype(self):
        return self.sources[0].dtype

    def uses_gates(self) -> bool:
        return self.gate_mode != "uniform"

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        """Trainable arrays: alignments only when enabled, gates only when used."""
        for i, w in enumerate(self.sources):
            yield f"src{i}.weight", w
            if self.biases is not None:
                yield f"src{i}.bias", self.biases[i]
        if self.align_enabled:
            for i, t in enumerate(self.alignments):
                yield f"align{i}", t
        if self.uses_gates():
            for i, gate in enumerate(self.gates):
                for pname, arr in gate.named_params():
                    yield f"gate{i}.{pname}", arr

    def aligned_sources(self) -> list[Tensor]:
        if not self.align_enabled:
            return list(self.sources)
        return [align_weights(t, w) for t, w in zip(self.alignments, self.sources)]


def new_adaagg_layer(
    name: str,
    sources: Sequence[Tensor],
    rng: np.random.Generator,
    biases: Sequence[Tensor] | None = None,
    stride: int = 1,
    padding: int = 0,
    align_enabled: bool = True,
    gate_mode: str = "per_sample",
) -> AdaAggLayer:
    """Copy the source kernels and attach identity alignments and uniform gates."""
    sources = [np.array(w, copy=True) for w in sources]
    if not sources:
        raise DimensionError(f"{name}: an aggregation layer needs at least one source")
    dtype = sources[0].dtype
    cout, cin = sources[0].shape[:2]
    layer = AdaAggLayer(
        name=name,
        sources=sources,
        alignments=[np.eye(cout, dtype=dtype) for _ in sources],
        gates=[new_gate(cin, len(sources), rng, dtype) for _ in sources],
        biases=None if biases is None else [np.array(b, copy=True) for b in biases],
        stride=stride,
        padding=padding,
        gate_mode=gate_mode,
        align_enabled=align_enabled,
    )
    return layer


def init_gates_uniform(layer: AdaAggLayer, m: int, rng: np.random.Generator) -> AdaAggLayer:
    if m < 1 or m != layer.m:
        raise ValueError(f"m={m} does not match layer with {layer.m} sources")
    cin = layer.weight_shape[1]
    for gate in layer.gates:
        fresh = new_gate(cin, m, rng, layer.dtype)
        gate.reduce_weight[...] = fresh.reduce_weight
        gate.reduce_bias[...] = fresh.reduce_bias
        gate.expand_weight[...] = fresh.expand_weight
        gate.expand_bias[...] = fresh.expand_bias
    return layer


def aggregate_weights(layer: AdaAggLayer, gate_values) -> Tensor:
    """Gate-weighted sum of the (aligned) source kernels for one set of gates."""
    coeffs = np.asarray(gate_values, dtype=np.float64)
    if coeffs.shape != (layer.m,):
        raise DimensionError(f"expected {layer.m} gate values, got shape {coeffs.shape}")
    return ops.mix_kernels(coeffs.astype(layer.dtype), layer.aligned_sources())


def aggregate_bias(layer: AdaAggLayer, gate_values) -> Tensor | None:
    if layer.biases is None:
        return None
    coeffs = np.asarray(gate_values, dtype=np.float64).astype(layer.dtype)
    return ops.mix_kernels(coeffs, layer.biases)


# ---------------------------------------------------------------------------
# temporal ensemble


@dataclass
class BatchStats:
    batch_size: int
    means: Tensor

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not np.all((self.means > 0) & (self.means < 1)):
            raise ValueError("batch-mean gate values must lie in (0, 1)")


@dataclass
class TEState:
    """Per-layer moving averages of batch-mean gate values."""

    decay: float = 0.9
    values: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"decay must lie in [0, 1), got {self.decay}")

    def initialized(self, layer: str) -> bool:
        return layer in self.values

    def get(self, layer: str) -> Tensor:
        try:
            return self.values[layer]
        except KeyError:
            raise StateError(f"temporal ensemble not initialized for layer {layer!r}") from None


def te_update(te: TEState, layer: str, stats: BatchStats | Tensor) -> TEState:
    """Fold one batch of mean gate values into the running average of ``layer``.

    The first batch initializes the average directly.
    """
    means = stats.means if isinstance(stats, BatchStats) else np.asarray(stats, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    if layer not in te.values:
        te.values[layer] = means.copy()
    else:
        prev = te.values[layer]
        if prev.shape != means.shape:
            raise DimensionError(f"{layer}: expected {prev.shape[0]} means, got {means.shape}")
        te.values[layer] = te.decay * prev + (1.0 - te.decay) * means
    return te


def te_closed_form(means: Sequence[Tensor], decay: float) -> Tensor:
    """Average after replaying ``means`` through :func:`te_update`, written out directly."""
    k = len(means)
    out = np.asarray(means[0], dtype=np.float64) * decay ** (k - 1)
    for j in range(1, k):
        out = out + (1.0 - decay) * decay ** (k - 1 - j) * np.asarray(means[j], dtype=np.float64)
    return out


def te_collapse(layer: AdaAggLayer, te: TEState) -> tuple[Tensor, Tensor | None]:
    abar = te.get(layer.name)
    return aggregate_weights(layer, abar), aggregate_bias(layer, abar)


def bn_init_average(params: Sequence[Sequence[Tensor]]) -> tuple[Tensor, ...]:
    """Elementwise mean of ``(gamma, beta, running_mean, running_var)`` tuples."""
    if not params:
        raise ValueError("need at least one batch-norm parameter set")
    c = params[0][0].shape
    for p in params:
        if any(np.shape(arr) != c for arr in p):
            raise DimensionError(f"batch-norm channel mismatch: {[np.shape(a) for a in p]} vs {c}")
    return tuple(np.mean(np.stack([p[k] for p in params]), axis=0) for k in range(len(params[0])))


# ---------------------------------------------------------------------------
# forward


class Binder:
    """Maps named arrays onto graph leaves, one leaf per name per graph."""

    def __init__(self, graph: Graph, trainable: Callable[[str], bool] | None = None):
        self.graph = graph
        self.trainable = trainable
        self.cache: dict[str, Node] = {}

    def __call__(self, name: str, array: Tensor) -> Node:
        node = self.cache.get(name)
        if node is None:
            if self.trainable is None or self.trainable(name):
                node = self.graph.param(array, name=name)
            else:
                node = self.graph.constant(array, name=name)
            self.cache[name] = node
        return node


def adaagg_forward(
    layer: AdaAggLayer,
    feat,
    te: TEState | None = None,
    *,
    training: bool = True,
    bind: Callable[[str, Tensor], Node] | None = None,
    gate_mode: str | None = None,
) -> Node:
    """Run ``feat`` through the layer.

    ``per_sample`` builds one kernel per sample; ``batch_average`` shares the
    batch-mean gates across the batch and, when ``te`` is given in training,
    folds them into the temporal ensemble; ``uniform`` fixes every gate at
    ``1/m``; ``frozen`` convolves with :func:`te_collapse`'s kernel.
    """
    if not isinstance(feat, Node):
        g = Graph()
        feat = g.constant(feat)
    g = feat.graph
    bind = bind if bind is not None else Binder(g)
    mode = gate_mode or layer.gate_mode
    if feat.value.ndim != 4 or feat.shape[1] != layer.weight_shape[1]:
        raise DimensionError(f"{layer.name}: input {feat.shape} vs weight {layer.weight_shape}")
    n = feat.shape[0]
    p = layer.name

    if mode == "frozen":
        if te is None:
            raise StateError(f"{layer.name}: frozen mode requires a temporal ensemble")
        weight, bias = te_collapse(layer, te)
        with ops.mac_scope(p):
            return ops.conv2d(feat, g.constant(weight), None if bias is None else g.constant(bias),
                            layer.stride, layer.padding)

    with ops.mac_scope(p):
        if training:
            kernels = []
            for i, w in enumerate(layer.sources):
                k = bind(f"{p}.src{i}.weight", w)
                if layer.align_enabled:
                    k = ops.channel_mix(bind(f"{p}.align{i}", layer.alignments[i]), k)
                kernels.append(k)
        else:
            # inference: alignment is input-independent and precomputed
            kernels = [g.constant(k) for k in layer.aligned_sources()]
        biases = None
        if layer.biases is not None:
            biases = [bind(f"{p}.src{i}.bias", b) for i, b in enumerate(layer.biases)]

        if mode == "uniform":
            coeffs = g.constant(np.full(layer.m, 1.0 / layer.m, dtype=layer.dtype))
            layer.last_gate_means = np.full(layer.m, 1.0 / layer.m)
        else:
            with ops.mac_scope(p, "gating"):
                pooled = ops.reshape(ops.global_avg_pool(feat), (n, feat.shape[1]))
                cols = [_gate_node(gate, pooled, bind, f"{p}.gate{i}")
                        for i, gate in enumerate(layer.gates)]
                coeffs = ops.concat(cols, axis=1) if layer.m > 1 else cols[0]
            layer.last_gate_means = coeffs.value.mean(axis=0).astype(np.float64)
            if mode == "batch_average":
                coeffs = ops.mean(coeffs, axis=0)
                if te is not None and training:
                    te_update(te, p, BatchStats(n, layer.last_gate_means))
            elif mode != "per_sample":
                raise ValueError(f"unknown gate mode {mode!r}")

        kernel = ops.weighted_sum(coeffs, kernels)
        bias = None if biases is None else ops.weighted_sum(coeffs, biases)
        if coeffs.value.ndim == 2:
            return ops.sample_conv2d(feat, kernel, bias, layer.stride, layer.padding)
        return ops.conv2d(feat, kernel, bias, layer.stride, layer.padding)
