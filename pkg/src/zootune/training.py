"""SGD training loops: source pretraining, zoo tuning and single-model baselines."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import tensor as ops
from .backbone import (
    BackboneConfig,
    Model,
    PlainConv,
    bn_name,
    build_plain_backbone,
    conv_specs,
    convert_to_zoo,
    plain_from_state,
)
from .data import Dataset
from .errors import ConfigError, EvaluationError, FormatError, TrainingError
from .io import SourceCheckpoint
from .layers import TEState, te_collapse
from .tensor import Graph

log = logging.getLogger(__name__)

MODES = ("full", "lite", "avg_agg", "no_align")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    iterations: int = 1000
    decay_at: tuple[float, ...] = (0.4, 0.8)
    decay_factor: float = 0.1
    seed: int = 0
    mode: str = "full"
    weight_decay: float = 0.0
    eval_every: int = 100
    dtype: str = "single"
    te_decay: float = 0.9

    def __post_init__(self):
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ConfigError("lr must be a positive finite number")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.dtype not in ops.DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(ops.DTYPES)}")
        if not (self.mode in MODES or self.mode.startswith("finetune:")):
            raise ConfigError(f"unknown mode {self.mode!r}")

    @property
    def np_dtype(self):
        return ops.DTYPES[self.dtype]

    def lr_at(self, iteration: int) -> float:
        passed = sum(iteration >= int(round(f * self.iterations)) for f in self.decay_at)
        return self.lr * self.decay_factor**passed


@dataclass
class EvalPoint:
    iteration: int
    train_loss: float
    eval_metric: float | None


@dataclass
class RunRecord:
    points: list[EvalPoint] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    gate_trace: list[tuple[int, dict[str, np.ndarray]]] = field(default_factory=list)
    final_metric: float | None = None
    train_macs: int = 0
    wall_clock: float = 0.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, RunRecord):
            return NotImplemented
        if (self.points, self.losses, self.final_metric, self.train_macs) != (
            other.points, other.losses, other.final_metric, other.train_macs
        ):
            return False
        if len(self.gate_trace) != len(other.gate_trace):
            return False
        for (ia, la), (ib, lb) in zip(self.gate_trace, other.gate_trace):
            if ia != ib or la.keys() != lb.keys():
                return False
            if any(not np.array_equal(la[k], lb[k]) for k in la):
                return False
        return True


def sgd_momentum_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float = 0.0,
) -> None:
    """``v <- momentum*v + g + wd*p; p <- p - lr*v``, in place."""
    if params.keys() != grads.keys() or params.keys() != velocity.keys():
        raise KeyError("params, grads and velocity must share one set of names")
    for name, p in params.items():
        v = velocity[name]
        v *= momentum
        v += grads[name]
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


def evaluate_accuracy(model: Model, data: Dataset, te: TEState | None = None, batch: int = 256) -> float:
    """Top-1 accuracy; ties go to the lowest class index."""
    if len(data) == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    preds = predict(model, data, te, batch).argmax(axis=1)
    return float(np.mean(preds == data.labels))


def predict(model: Model, data: Dataset, te: TEState | None = None, batch: int = 256) -> np.ndarray:
    """Eval-mode logits for every item of ``data``."""
    out = []
    for start in range(0, len(data), batch):
        x = data.images[start : start + batch].astype(model.dtype)
        out.append(model.forward(Graph(), x, training=False, te=te).value)
    return np.concatenate(out)


def fit(
    model: Model,
    train: Dataset,
    config: TrainConfig,
    te: TEState | None = None,
    eval_data: Dataset | None = None,
) -> RunRecord:
    """Minimize softmax cross-entropy over ``train`` with momentum SGD."""
    if len(train) == 0:
        raise TrainingError("training set is empty")
    b = min(config.batch_size, len(train))
    rng = np.random.default_rng([config.seed, 2])
    params = model.named_params()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    record = RunRecord()
    counter = ops.MacCounter()
    images = train.images.astype(model.dtype)
    perm, pos = rng.permutation(len(train)), 0
    started = time.perf_counter()
    for it in range(config.iterations):
        if pos + b > len(train):
            perm, pos = rng.permutation(len(train)), 0
        idx = perm[pos : pos + b]
        pos += b
        g = Graph()
        # overflow on a diverging run is reported through the loss check instead
        with np.errstate(over="ignore", invalid="ignore"), ops.count_macs(counter):
            logits = model.forward(g, images[idx], training=True, te=te)
            loss = ops.softmax_cross_entropy(logits, train.labels[idx])
        value = ops.as_scalar(loss)
        if not np.isfinite(value):
            raise TrainingError(f"loss diverged at iteration {it}", iteration=it)
        with np.errstate(over="ignore", invalid="ignore"):
            named = g.named(g.backward(loss))
        grads = {k: named.get(k, np.zeros_like(p)) for k, p in params.items()}
        sgd_momentum_step(params, grads, velocity, config.lr_at(it), config.momentum, config.weight_decay)
        record.losses.append(value)
        layers = model.adaagg_layers()
        if layers:
            record.gate_trace.append((it, {l.name: l.last_gate_means.copy() for l in layers}))
        last = it == config.iterations - 1
        if (it + 1) % config.eval_every == 0 or last:
            metric = evaluate_accuracy(model, eval_data, te) if eval_data is not None else None
            record.points.append(EvalPoint(it + 1, value, metric))
            log.info("iter %d loss %.4f metric %s", it + 1, value, metric)
    record.train_macs = counter.total()
    record.final_metric = record.points[-1].eval_metric if record.points else None
    record.wall_clock = time.perf_counter() - started
    return record


def source_checkpoint(model: Model, name: str, task_id: str, seed: int, include_head: bool = False) -> SourceCheckpoint:
    meta = {
        "kind": "plain",
        "name": name,
        "task_id": task_id,
        "seed": str(seed),
        "digest": model.config.digest(),
        "config": json.dumps(model.config.to_dict(), sort_keys=True),
    }
    tensors = {k: np.array(v, copy=True) for k, v in model.state(include_head=include_head).items()}
    return SourceCheckpoint(meta, tensors)


def model_checkpoint(model: Model, name: str = "model", task_id: str = "", seed: int = 0) -> SourceCheckpoint:
    """Package a trained model (head included) with enough metadata to rebuild it."""
    ckpt = source_checkpoint(model, name, task_id, seed, include_head=True)
    if model.is_zoo:
        layers = {
            c.name: {"gate_mode": c.gate_mode, "align": c.align_enabled}
            for c in model.adaagg_layers()
        }
        ckpt.metadata.update(kind="zoo", m=str(model.m), layers=json.dumps(layers, sort_keys=True))
    return ckpt


def model_from_checkpoint(ckpt: SourceCheckpoint, seed: int = 0) -> Model:
    """Inverse of :func:`model_checkpoint`; plain checkpoints without a head get one from ``seed``."""
    meta = ckpt.metadata
    try:
        config = BackboneConfig.from_dict(json.loads(meta["config"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"checkpoint lacks a usable backbone config: {exc}") from None
    if meta.get("digest") not in (None, config.digest()):
        raise FormatError("checkpoint digest does not match its backbone config")
    kind = meta.get("kind", "plain")
    if kind == "plain":
        return plain_from_state(config, ckpt.tensors, seed=seed)
    if kind != "zoo":
        raise FormatError(f"cannot build a model from a {kind!r} checkpoint")
    try:
        m = int(meta["m"])
        layers = json.loads(meta["layers"])
        # stand-in sources: the real values arrive through load_state below
        zoo = []
        for i in range(m):
            src = {}
            for spec in conv_specs(config):
                src[f"{spec.name}.weight"] = ckpt.tensors[f"{spec.name}.src{i}.weight"]
                bn = bn_name(spec.name)
                for p in ("gamma", "beta", "running_mean", "running_var"):
                    src[f"{bn}.{p}"] = ckpt.tensors[f"{bn}.{p}"]
            zoo.append(src)
        model = convert_to_zoo(config, zoo, seed)
        for conv in model.adaagg_layers():
            conv.gate_mode = layers[conv.name]["gate_mode"]
            conv.align_enabled = bool(layers[conv.name]["align"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed zoo checkpoint: {exc}") from None
    model.load_state(ckpt.tensors)
    return model


def train_source(
    task: Dataset,
    config: TrainConfig,
    backbone: BackboneConfig,
    name: str = "source",
    task_id: str = "",
    include_head: bool = False,
    eval_data: Dataset | None = None,
    init: Mapping | None = None,
) -> tuple[SourceCheckpoint, RunRecord]:
    """Train a plain backbone and package it as a zoo member.

    Training starts from scratch, or from the non-head tensors of ``init`` when given.
    """
    backbone = replace(backbone, classes=task.classes)
    if init is None:
        model = build_plain_backbone(backbone, config.seed, config.np_dtype)
    else:
        body = {k: v for k, v in init.items() if not k.startswith("head.")}
        model = plain_from_state(backbone, body, seed=config.seed, dtype=config.np_dtype)
    record = fit(model, task, config, eval_data=eval_data)
    return source_checkpoint(model, name, task_id, config.seed, include_head), record


def _zoo_tensors(zoo: Sequence[SourceCheckpoint | Mapping]) -> tuple[list[Mapping], list[str | None]]:
    tensors, digests = [], []
    for z in zoo:
        if isinstance(z, SourceCheckpoint):
            tensors.append(z.tensors)
            digests.append(z.digest)
        else:
            tensors.append(z)
            digests.append(None)
    return tensors, digests


def build_zoo_model(zoo, backbone: BackboneConfig, config: TrainConfig) -> tuple[Model, TEState | None]:
    tensors, digests = _zoo_tensors(zoo)
    settings = {
        "full": (True, "per_sample"),
        "lite": (True, "batch_average"),
        "avg_agg": (False, "uniform"),
        "no_align": (False, "per_sample"),
    }
    if config.mode not in settings:
        raise ConfigError(f"zoo tuning mode must be one of {sorted(settings)}, got {config.mode!r}")
    align, gate_mode = settings[config.mode]
    model = convert_to_zoo(backbone, tensors, config.seed, align=align, gate_mode=gate_mode,
                           dtype=config.np_dtype, digests=digests)
    te = TEState(decay=config.te_decay) if config.mode == "lite" else None
    return model, te


def zoo_tune(
    zoo: Sequence[SourceCheckpoint | Mapping],
    target: Dataset,
    config: TrainConfig,
    backbone: BackboneConfig,
    eval_data: Dataset | None = None,
) -> tuple[Model, TEState | None, RunRecord]:
    """Adapt the whole zoo to ``target``; returns the model, the ensemble (lite only) and the record."""
    backbone = replace(backbone, classes=target.classes)
    model, te = build_zoo_model(zoo, backbone, config)
    record = fit(model, target, config, te=te, eval_data=eval_data)
    return model, te, record


def finetune_single(
    zoo: Sequence[SourceCheckpoint | Mapping],
    index: int,
    target: Dataset,
    config: TrainConfig,
    backbone: BackboneConfig,
    eval_data: Dataset | None = None,
) -> tuple[Model, RunRecord]:
    if not 0 <= index < len(zoo):
        raise IndexError(f"source index {index} out of range for a zoo of {len(zoo)}")
    backbone = replace(backbone, classes=target.classes)
    tensors, _ = _zoo_tensors(zoo)
    src = {k: v for k, v in tensors[index].items() if not k.startswith("head.")}
    model = plain_from_state(backbone, src, seed=config.seed, dtype=config.np_dtype)
    record = fit(model, target, config, eval_data=eval_data)
    return model, record


def ensemble_accuracy(models: Sequence[Model], data: Dataset) -> float:
    """Accuracy of the averaged softmax probabilities of ``models``."""
    if len(data) == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    probs = sum(ops.softmax(predict(m, data)) for m in models) / len(models)
    return float(np.mean(probs.argmax(axis=1) == data.labels))


def run_baseline(
    kind: str,
    zoo: Sequence[SourceCheckpoint | Mapping],
    target: Dataset,
    config: TrainConfig,
    backbone: BackboneConfig,
    eval_data: Dataset | None = None,
) -> tuple[float | None, RunRecord, list[Model]]:
    """``finetune:i``, ``ensemble`` or ``avg_agg``; returns (metric, record, models)."""
    if kind.startswith("finetune:"):
        try:
            index = int(kind.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad baseline kind {kind!r}") from None
        model, record = finetune_single(zoo, index, target, config, backbone, eval_data)
        return record.final_metric, record, [model]
    if kind == "ensemble":
        models, total = [], RunRecord()
        for i in range(len(zoo)):
            model, rec = finetune_single(zoo, i, target, config, backbone, None)
            models.append(model)
            total.train_macs += rec.train_macs
            total.wall_clock += rec.wall_clock
            total.losses = [a + b / len(zoo) for a, b in zip(total.losses or [0.0] * len(rec.losses), rec.losses)]
        metric = ensemble_accuracy(models, eval_data) if eval_data is not None else None
        total.final_metric = metric
        total.points.append(EvalPoint(config.iterations, total.losses[-1] if total.losses else float("nan"), metric))
        return metric, total, models
    if kind == "avg_agg":
        model, _, record = zoo_tune(zoo, target, replace(config, mode="avg_agg"), backbone, eval_data)
        return record.final_metric, record, [model]
    raise ConfigError(f"unknown baseline kind {kind!r}")


def collapse(model: Model, te: TEState) -> Model:
    """Replace every aggregation layer with its TE-collapsed plain convolution."""
    out = model.clone()
    for name, conv in list(out.convs.items()):
        if isinstance(conv, PlainConv):
            continue
        weight, bias = te_collapse(conv, te)
        if bias is not None:
            raise ValueError(f"{name}: collapsing per-source biases into a bias-free backbone")
        out.convs[name] = PlainConv(name, np.ascontiguousarray(weight), conv.stride, conv.padding)
    return out
