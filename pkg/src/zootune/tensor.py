"""Dense tensors on numpy with a single-use reverse-mode tape.

Values are plain ``numpy.ndarray`` objects.  A :class:`Graph` records every
operation applied to its :class:`Node` objects; :meth:`Graph.backward` walks
the record in reverse and returns gradients for the trainable leaves.

Only the operations the residual backbone and the aggregation layers need are
provided.  Convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import defaultdict
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import (
    DegenerateBatchError,
    DimensionError,
    GeometryError,
    GraphError,
    LabelError,
    NonFiniteError,
)

Tensor = np.ndarray

DTYPES = {"single": np.float32, "double": np.float64}


def as_tensor(data, dtype=np.float64) -> Tensor:
    """Validate external input and return a contiguous array of ``dtype``."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if arr.ndim == 0:
        arr = arr.reshape(())
    if any(d <= 0 for d in arr.shape):
        raise DimensionError(f"all dimensions must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation


class MacCounter:
    """Tallies multiply-accumulates per (layer, category) while active."""

    def __init__(self):
        self.counts: dict[tuple[str, str], int] = defaultdict(int)
        self._scope: list[tuple[str, str | None]] = []
        self.paused = 0

    def add(self, default_category: str, macs: int) -> None:
        if self.paused or not self._scope:
            return
        layer, category = self._scope[-1]
        self.counts[(layer, category or default_category)] += int(macs)

    def total(self, category: str | None = None) -> int:
        return sum(v for (_, c), v in self.counts.items() if category in (None, c))

    def by_layer(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = defaultdict(dict)
        for (layer, cat), v in self.counts.items():
            out[layer][cat] = out[layer].get(cat, 0) + v
        return dict(out)


_COUNTER: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar(
    "zootune_mac_counter", default=None
)


@contextlib.contextmanager
def count_macs(counter: MacCounter | None = None) -> Iterator[MacCounter]:
    counter = counter if counter is not None else MacCounter()
    token = _COUNTER.set(counter)
    try:
        yield counter
    finally:
        _COUNTER.reset(token)


@contextlib.contextmanager
def mac_scope(layer: str, category: str | None = None) -> Iterator[None]:
    """Attribute MACs of enclosed ops to ``layer`` (optionally forcing a category)."""
    counter = _COUNTER.get()
    if counter is None:
        yield
        return
    counter._scope.append((layer, category))
    try:
        yield
    finally:
        counter._scope.pop()


@contextlib.contextmanager
def macs_paused() -> Iterator[None]:
    counter = _COUNTER.get()
    if counter is None:
        yield
        return
    counter.paused += 1
    try:
        yield
    finally:
        counter.paused -= 1


def _tally(category: str, macs: int) -> None:
    counter = _COUNTER.get()
    if counter is not None:
        counter.add(category, macs)


# ---------------------------------------------------------------------------
# tape


class Node:
    __slots__ = ("graph", "id", "value", "op", "inputs", "backward_fn", "trainable", "name")

    def __init__(self, graph, id, value, op, inputs, backward_fn, trainable=False, name=None):
        self.graph = graph
        self.id = id
        self.value = value
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.trainable = trainable
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.id}, {self.op}{label}, shape={self.shape})"


class Graph:
    """Topologically ordered record of one forward computation.

    A graph is single-use: calling :meth:`backward` a second time raises
    :class:`GraphError`.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def _add(self, value, op, inputs=(), backward_fn=None, trainable=False, name=None) -> Node:
        if self.consumed:
            raise GraphError("graph already differentiated; build a fresh one")
        if inputs and not any(_needs_grad(i) for i in inputs):
            backward_fn = None
        node = Node(self, len(self.nodes), value, op, tuple(inputs), backward_fn, trainable, name)
        self.nodes.append(node)
        return node

    def param(self, value: Tensor, name: str | None = None) -> Node:
        """Register a trainable leaf.  The array is used without copying."""
        return self._add(np.asarray(value), "param", trainable=True, name=name)

    def constant(self, value, name: str | None = None, dtype=None) -> Node:
        return self._add(np.asarray(value, dtype=dtype), "const", name=name)

    def leaves(self) -> list[Node]:
        return [n for n in self.nodes if n.trainable]

    def backward(self, loss: Node) -> dict[int, Tensor]:
        if self.consumed:
            raise GraphError("backward already ran on this graph")
        if loss.graph is not self:
            raise GraphError("loss node belongs to a different graph")
        if loss.value.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        self.consumed = True
        grads: list[Tensor | None] = [None] * len(self.nodes)
        grads[loss.id] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads[node.id]
            if g is None or node.backward_fn is None:
                continue
            for inp, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not _needs_grad(inp):
                    continue
                grads[inp.id] = gi if grads[inp.id] is None else grads[inp.id] + gi
        out = {}
        for leaf in self.leaves():
            g = grads[leaf.id]
            out[leaf.id] = np.zeros_like(leaf.value) if g is None else g
        for node in self.nodes:
            node.backward_fn = None
        return out

    def named(self, grads: dict[int, Tensor]) -> dict[str, Tensor]:
        """Re-key a gradient map by leaf name (leaves without a name are dropped)."""
        out = {}
        for leaf in self.leaves():
            if leaf.name is not None:
                g = grads[leaf.id]
                out[leaf.name] = g if leaf.name not in out else out[leaf.name] + g
        return out


def _needs_grad(node: Node) -> bool:
    return node.trainable or node.backward_fn is not None


def _graph_of(*items) -> Graph:
    graph = None
    for it in items:
        if isinstance(it, Node):
            if graph is None:
                graph = it.graph
            elif it.graph is not graph:
                raise GraphError("operands belong to different graphs")
    if graph is None:
        raise GraphError("at least one operand must be a graph node")
    return graph


def _node(graph: Graph, x) -> Node:
    return x if isinstance(x, Node) else graph.constant(x)


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# convolution kernels


def _conv_geometry(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    if stride < 1 or padding < 0:
        raise GeometryError(f"stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise GeometryError(
            f"kernel {k} with stride {stride}, padding {padding} does not fit input {h}x{w}"
        )
    return ho, wo


class _Cols:
    """Unfolded input patches plus what is needed to fold gradients back.

    For stride-1 kernels the patches are laid out on a row pitch equal to the
    padded width, which turns every kernel offset into one contiguous slice of
    the flattened padded image.  The extra ``K-1`` columns per output row are
    discarded after the matmul.
    """

    __slots__ = ("data", "x_shape", "k", "stride", "padding", "ho", "wo", "pitch")

    def __init__(self, x: Tensor, k: int, stride: int, padding: int):
        n, c, h, w = x.shape
        self.x_shape, self.k, self.stride, self.padding = x.shape, k, stride, padding
        self.ho, self.wo = ho, wo = _conv_geometry(h, w, k, stride, padding)
        if k == 1 and padding == 0:
            xs = x if stride == 1 else x[:, :, ::stride, ::stride]
            self.pitch = wo
            self.data = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
        elif stride == 1:
            hp, wp = h + 2 * padding, w + 2 * padding
            self.pitch = wp
            flat = np.zeros((n, c, hp * wp + k), dtype=x.dtype)
            flat[:, :, : hp * wp].reshape(n, c, hp, wp)[:, :, padding : padding + h, padding : padding + w] = x
            cols = np.empty((n, c, k, k, ho * wp), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    o = i * wp + j
                    cols[:, :, i, j] = flat[:, :, o : o + ho * wp]
            self.data = cols.reshape(n, c * k * k, ho * wp)
        else:
            self.pitch = wo
            if padding:
                x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
            cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            self.data = cols.reshape(n, c * k * k, ho * wo)

    def crop(self, out: Tensor) -> Tensor:
        """[N,C_out,ho*pitch] -> [N,C_out,ho,wo]."""
        n, co = out.shape[:2]
        out = out.reshape(n, co, self.ho, self.pitch)
        return out if self.pitch == self.wo else np.ascontiguousarray(out[..., : self.wo])

    def widen(self, gout: Tensor) -> Tensor:
        """[N,C_out,ho,wo] -> [N,C_out,ho*pitch] with zeros in the discarded columns."""
        n, co = gout.shape[:2]
        if self.pitch == self.wo:
            return gout.reshape(n, co, self.ho * self.wo)
        wide = np.zeros((n, co, self.ho, self.pitch), dtype=gout.dtype)
        wide[..., : self.wo] = gout
        return wide.reshape(n, co, self.ho * self.pitch)

    def fold(self, dcols: Tensor) -> Tensor:
        """Scatter-add patch gradients [N, C*K*K, ho*pitch] back onto the input."""
        n, c, h, w = self.x_shape
        k, s, p, ho, wo = self.k, self.stride, self.padding, self.ho, self.wo
        if k == 1 and p == 0:
            if s == 1:
                return dcols.reshape(n, c, h, w)
            dx = np.zeros(self.x_shape, dtype=dcols.dtype)
            dx[:, :, ::s, ::s][:, :, :ho, :wo] = dcols.reshape(n, c, ho, wo)
            return dx
        hp, wp = h + 2 * p, w + 2 * p
        if s == 1:
            cols = dcols.reshape(n, c, k, k, ho * wp)
            flat = np.zeros((n, c, hp * wp + k), dtype=dcols.dtype)
            for i in range(k):
                for j in range(k):
                    o = i * wp + j
                    flat[:, :, o : o + ho * wp] += cols[:, :, i, j]
            dx = flat[:, :, : hp * wp].reshape(n, c, hp, wp)
        else:
            cols = dcols.reshape(n, c, k, k, ho, wo)
            dx = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
            for i in range(k):
                for j in range(k):
                    dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols[:, :, i, j]
        return np.ascontiguousarray(dx[:, :, p : p + h, p : p + w])


def _check_conv(x_shape, w_shape, per_sample: bool):
    if len(x_shape) != 4:
        raise DimensionError(f"conv input must be [N,C,H,W], got {tuple(x_shape)}")
    wdims = 5 if per_sample else 4
    if len(w_shape) != wdims or w_shape[-1] != w_shape[-2]:
        raise DimensionError(f"conv weight has bad shape {tuple(w_shape)}")
    if w_shape[-3] != x_shape[1]:
        raise DimensionError(
            f"weight {tuple(w_shape)} expects {w_shape[-3]} input channels, "
            f"input {tuple(x_shape)} has {x_shape[1]}"
        )
    if per_sample and w_shape[0] != x_shape[0]:
        raise DimensionError(f"per-sample weight {tuple(w_shape)} vs input {tuple(x_shape)}")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Node:
    """Cross-correlation of ``x`` [N,C_in,H,W] with ``weight`` [C_out,C_in,K,K]."""
    g = _graph_of(x, weight, bias)
    x, weight = _node(g, x), _node(g, weight)
    _check_conv(x.shape, weight.shape, per_sample=False)
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    ho, wo = _conv_geometry(h, w, k, stride, padding)
    cols = _Cols(x.value, k, stride, padding)
    wf = weight.value.reshape(cout, -1)
    out = cols.crop(np.matmul(wf, cols.data))
    inputs = [x, weight]
    if bias is not None:
        bias = _node(g, bias)
        if bias.shape != (cout,):
            raise DimensionError(f"bias {bias.shape} does not match {cout} output channels")
        out = out + bias.value.reshape(1, cout, 1, 1)
        inputs.append(bias)
    _tally("base", n * ho * wo * cout * cin * k * k)

    def backward(gout):
        g2 = cols.widen(gout)
        dw = np.matmul(cols.data, g2.transpose(0, 2, 1)).sum(axis=0).T.reshape(weight.shape)
        dx = cols.fold(np.matmul(wf.T, g2)) if _needs_grad(x) else None
        grads = [dx, dw]
        if bias is not None:
            grads.append(gout.sum(axis=(0, 2, 3)))
        return grads

    return g._add(out, "conv2d", inputs, backward)


def sample_conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Node:
    """Convolution where sample ``j`` uses its own kernel ``weight[j]`` [N,C_out,C_in,K,K]."""
    g = _graph_of(x, weight, bias)
    x, weight = _node(g, x), _node(g, weight)
    _check_conv(x.shape, weight.shape, per_sample=True)
    n, cin, h, w = x.shape
    _, cout, _, k, _ = weight.shape
    ho, wo = _conv_geometry(h, w, k, stride, padding)
    cols = _Cols(x.value, k, stride, padding)
    wf = weight.value.reshape(n, cout, -1)
    out = cols.crop(np.matmul(wf, cols.data))
    inputs = [x, weight]
    if bias is not None:
        bias = _node(g, bias)
        if bias.shape != (n, cout):
            raise DimensionError(f"per-sample bias {bias.shape} does not match ({n}, {cout})")
        out = out + bias.value.reshape(n, cout, 1, 1)
        inputs.append(bias)
    _tally("base", n * ho * wo * cout * cin * k * k)

    def backward(gout):
        g2 = cols.widen(gout)
        dw = np.matmul(cols.data, g2.transpose(0, 2, 1)).transpose(0, 2, 1).reshape(weight.shape)
        dx = cols.fold(np.matmul(wf.transpose(0, 2, 1), g2)) if _needs_grad(x) else None
        grads = [dx, dw]
        if bias is not None:
            grads.append(gout.sum(axis=(2, 3)))
        return grads

    return g._add(out, "sample_conv2d", inputs, backward)


# ---------------------------------------------------------------------------
# other layers


def global_avg_pool(x: Node) -> Node:
    if x.value.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = x.value.mean(axis=(2, 3), keepdims=True)
    _tally("gating", n * c * h * w)

    def backward(g):
        return (np.broadcast_to(g / (h * w), (n, c, h, w)).copy(),)

    return x.graph._add(out, "global_avg_pool", [x], backward)


def affine(x, weight, bias=None) -> Node:
    """``x @ weight.T + bias`` for ``x`` [N,D_in], ``weight`` [D_out,D_in]."""
    g = _graph_of(x, weight, bias)
    x, weight = _node(g, x), _node(g, weight)
    if x.value.ndim != 2 or weight.value.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    out = x.value @ weight.value.T
    inputs = [x, weight]
    if bias is not None:
        bias = _node(g, bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"affine: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.value
        inputs.append(bias)
    _tally("base", x.shape[0] * weight.shape[0] * weight.shape[1])

    def backward(gout):
        grads = [gout @ weight.value, gout.T @ x.value]
        if bias is not None:
            grads.append(gout.sum(axis=0))
        return grads

    return g._add(out, "affine", inputs, backward)


def batch_norm(
    x: Node,
    gamma,
    beta,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Node:
    """Per-channel normalization of [N,C,H,W].

    Train mode normalizes with the biased batch variance and folds the unbiased
    variance into ``running_var`` (both running arrays are updated in place).
    """
    g = _graph_of(x, gamma, beta)
    x, gamma, beta = _node(g, x), _node(g, gamma), _node(g, beta)
    if x.value.ndim != 4:
        raise DimensionError(f"batch_norm expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    for name, arr in (("gamma", gamma.value), ("beta", beta.value),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise DimensionError(f"batch_norm {name} has shape {arr.shape}, expected ({c},)")
    count = n * h * w
    if training:
        if count < 2:
            raise DegenerateBatchError("train-mode batch_norm needs at least 2 values per channel")
        mean = x.value.mean(axis=(0, 2, 3))
        var = x.value.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.value.reshape(1, c, 1, 1) * xhat + beta.value.reshape(1, c, 1, 1)
    out = out.astype(x.value.dtype, copy=False)

    def backward(gout):
        dgamma = (gout * xhat).sum(axis=(0, 2, 3))
        dbeta = gout.sum(axis=(0, 2, 3))
        dxhat = gout * gamma.value.reshape(1, c, 1, 1)
        if training:
            dx = (
                dxhat
                - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            ) * inv_std.reshape(1, c, 1, 1)
        else:
            dx = dxhat * inv_std.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta

    return g._add(out, "batch_norm", [x, gamma, beta], backward)


def _sigmoid(v: Tensor) -> Tensor:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activation(x: Node, kind: str) -> Node:
    if kind == "relu":
        mask = x.value > 0
        return x.graph._add(x.value * mask, "relu", [x], lambda g: (g * mask,))
    if kind == "sigmoid":
        s = _sigmoid(x.value)
        return x.graph._add(s, "sigmoid", [x], lambda g: (g * s * (1.0 - s),))
    raise ValueError(f"unknown activation {kind!r}")


def clip(x: Node, lo: float, hi: float) -> Node:
    """Clamp to ``[lo, hi]``; the gradient is zero wherever the clamp is active."""
    inside = (x.value >= lo) & (x.value <= hi)
    return x.graph._add(np.clip(x.value, lo, hi), "clip", [x], lambda g: (g * inside,))


def relu(x: Node) -> Node:
    return activation(x, "relu")


def sigmoid(x: Node) -> Node:
    return activation(x, "sigmoid")


def softmax(logits: Tensor) -> Tensor:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} incompatible with labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"labels must lie in [0, {c})")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((logsum - z[rows, labels]).mean(), dtype=logits.value.dtype)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return logits.graph._add(loss, "softmax_cross_entropy", [logits], backward)


# ---------------------------------------------------------------------------
# structural ops


def add(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = _node(g, a), _node(g, b)
    out = a.value + b.value
    sa, sb = a.shape, b.shape
    return g._add(out, "add", [a, b], lambda gr: (_unbroadcast(gr, sa), _unbroadcast(gr, sb)))


def reshape(x: Node, shape) -> Node:
    src = x.shape
    return x.graph._add(x.value.reshape(shape), "reshape", [x], lambda g: (g.reshape(src),))


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    g = _graph_of(*nodes)
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    return g._add(out, "concat", nodes, lambda gr: tuple(np.split(gr, bounds, axis=axis)))


def mean(x: Node, axis: int) -> Node:
    n = x.shape[axis]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return x.graph._add(x.value.mean(axis=axis), "mean", [x], backward)


def total(x: Node) -> Node:
    """Sum of every entry, as a scalar node."""
    shape = x.shape
    return x.graph._add(
        np.asarray(x.value.sum()), "sum", [x], lambda g: (np.full(shape, g, dtype=x.value.dtype),)
    )


def channel_mix(mix, weight) -> Node:
    """Recombine output channels of a kernel: ``out[o] = sum_q mix[o, q] * weight[q]``."""
    g = _graph_of(mix, weight)
    mix, weight = _node(g, mix), _node(g, weight)
    cout = weight.shape[0]
    if mix.shape != (cout, cout):
        raise DimensionError(f"alignment {mix.shape} does not match weight {weight.shape}")
    flat = weight.value.reshape(cout, -1)
    out = (mix.value @ flat).reshape(weight.shape)
    _tally("align", cout * flat.size)

    def backward(gout):
        g2 = gout.reshape(cout, -1)
        return g2 @ flat.T, (mix.value.T @ g2).reshape(weight.shape)

    return g._add(out, "channel_mix", [mix, weight], backward)


def mix_kernels(coeffs: Tensor, kernels: Sequence[Tensor]) -> Tensor:
    """``sum_i coeffs[..., i] * kernels[i]`` accumulated in source order.

    ``coeffs`` is [m] (one shared result) or [N, m] (one result per row).  The
    fixed accumulation order makes shared and per-row results bitwise equal
    for equal coefficients.
    """
    coeffs = np.asarray(coeffs).astype(kernels[0].dtype, copy=False)
    lead = coeffs.shape[:-1]
    expand = (slice(None),) * len(lead) + (None,) * kernels[0].ndim
    out = coeffs[..., 0][expand] * kernels[0]
    for i in range(1, len(kernels)):
        out = out + coeffs[..., i][expand] * kernels[i]
    return out


def weighted_sum(coeffs, kernels: Sequence) -> Node:
    """Graph version of :func:`mix_kernels`; differentiable in coeffs and kernels."""
    g = _graph_of(coeffs, *kernels)
    coeffs = _node(g, coeffs)
    kernels = [_node(g, k) for k in kernels]
    m = len(kernels)
    if coeffs.shape[-1] != m or coeffs.value.ndim not in (1, 2):
        raise DimensionError(f"coefficients {coeffs.shape} do not match {m} kernels")
    shape = kernels[0].shape
    if any(k.shape != shape for k in kernels):
        raise DimensionError("kernels must share one shape")
    kvals = [k.value for k in kernels]
    out = mix_kernels(coeffs.value, kvals)
    rows = coeffs.shape[0] if coeffs.value.ndim == 2 else 1
    _tally("agg", rows * m * kvals[0].size)

    def backward(gout):
        if coeffs.value.ndim == 1:
            dc = np.array([np.vdot(gout, kv) for kv in kvals], dtype=gout.dtype)
            dks = [coeffs.value[i] * gout for i in range(m)]
        else:
            gflat = gout.reshape(rows, -1)
            dc = np.stack([gflat @ kv.reshape(-1) for kv in kvals], axis=1)
            dks = [np.tensordot(coeffs.value[:, i], gout, axes=1) for i in range(m)]
        return (dc, *dks)

    return g._add(out, "weighted_sum", [coeffs, *kernels], backward)


def as_scalar(node: Node) -> float:
    return float(node.value.reshape(()))


GraphBuilder = Callable[[Graph, Sequence[Node]], Node]
