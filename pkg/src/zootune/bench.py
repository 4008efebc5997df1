"""Desk-scale transfer benchmark on the factored synthetic tasks.

Three single-factor source tasks (shape, orientation, color) feed a zoo; the
target is the 8-class composite task, trained from a small labelled subset.
All sources are trained from one upstream model fitted on factor levels the
target never uses, so their weights stay comparable.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import BackboneConfig
from .data import FACTORS, Dataset, TaskSpec, composite_task, gen_synthetic_task, single_factor_task, train_test_split
from .io import SourceCheckpoint
from .training import RunRecord, TrainConfig, finetune_single, train_source, zoo_tune

log = logging.getLogger(__name__)

SOURCE_FACTORS = ("shape", "orientation", "color")


@dataclass(frozen=True)
class DeskSetup:
    backbone: BackboneConfig = BackboneConfig()
    source_samples_per_class: int = 150
    source_iterations: int = 600
    target_samples_per_class: int = 100
    target_train_per_class: int = 15
    noise: float = 0.1
    data_seed: int = 0
    # iterations of a shared upstream model every source is trained from; 0 trains each from scratch
    base_iterations: int = 300


@dataclass
class DeskResults:
    accuracy: dict[str, list[float]] = field(default_factory=dict)
    records: dict[str, list[RunRecord]] = field(default_factory=dict)
    source_accuracy: list[float] = field(default_factory=list)
    seconds: float = 0.0
    source_seconds: float = 0.0

    def mean(self, method: str) -> float:
        return float(np.mean(self.accuracy[method]))

    def seconds_for(self, methods) -> float:
        """Source pretraining plus the tuning wall clock of ``methods`` only."""
        return self.source_seconds + sum(r.wall_clock for m in methods for r in self.records[m])

    def add(self, method: str, record: RunRecord) -> None:
        self.accuracy.setdefault(method, []).append(record.final_metric)
        self.records.setdefault(method, []).append(record)


def desk_sources(setup: DeskSetup = DeskSetup()) -> tuple[list[SourceCheckpoint], list[float]]:
    """Pretrain one plain backbone per source factor; returns checkpoints and held-out accuracies."""
    zoo, accs = [], []
    base = desk_base(setup).tensors if setup.base_iterations else None
    for i, factor in enumerate(SOURCE_FACTORS):
        spec = single_factor_task(factor, samples_per_class=setup.source_samples_per_class,
                                  noise=setup.noise, seed=setup.data_seed + 100 + i)
        train, test = train_test_split(gen_synthetic_task(spec), 0.8, setup.data_seed)
        config = TrainConfig(iterations=setup.source_iterations, seed=setup.data_seed + i,
                             eval_every=setup.source_iterations)
        ckpt, record = train_source(train, config, setup.backbone, name=factor, task_id=factor,
                                    eval_data=test, init=base)
        zoo.append(ckpt)
        accs.append(record.final_metric)
        log.info("source %s: held-out accuracy %.3f", factor, record.final_metric)
    return zoo, accs


def desk_base(setup: DeskSetup = DeskSetup()) -> SourceCheckpoint:
    """Upstream model on the factor levels the target never uses (2 and 3 of each)."""
    rows = tuple(itertools.product((2, 3), repeat=len(FACTORS)))
    spec = TaskSpec(FACTORS, rows, samples_per_class=setup.source_samples_per_class // 2,
                    noise=setup.noise, seed=setup.data_seed + 300)
    config = TrainConfig(iterations=setup.base_iterations, seed=setup.data_seed + 50,
                         eval_every=setup.base_iterations)
    ckpt, _ = train_source(gen_synthetic_task(spec), config, setup.backbone, name="base", task_id="base")
    return ckpt


def desk_target(setup: DeskSetup = DeskSetup()) -> tuple[Dataset, Dataset]:
    """Small labelled training subset and a full held-out split of the composite task."""
    spec = composite_task(2, samples_per_class=setup.target_samples_per_class, noise=setup.noise,
                          seed=setup.data_seed + 200)
    train, test = train_test_split(gen_synthetic_task(spec), 0.8, setup.data_seed)
    rng = np.random.default_rng([setup.data_seed, 17])
    keep = np.sort(np.concatenate([
        rng.choice(np.flatnonzero(train.labels == c), setup.target_train_per_class, replace=False)
        for c in range(train.classes)
    ]))
    return train.subset(keep), test


def run_desk(
    methods: tuple[str, ...] = ("full", "no_align", "avg_agg", "finetune:0", "finetune:1", "finetune:2",
                                "full@1", "full@2"),
    seeds: tuple[int, ...] = (0, 1, 2),
    iterations: int = 1000,
    setup: DeskSetup = DeskSetup(),
) -> DeskResults:
    """Run every method for every seed on the composite target.

    ``full@k`` is full zoo tuning over the first ``k`` sources only.
    """
    started = time.perf_counter()
    zoo, source_acc = desk_sources(setup)
    train, test = desk_target(setup)
    out = DeskResults(source_accuracy=source_acc, source_seconds=time.perf_counter() - started)
    for method in methods:
        for seed in seeds:
            config = TrainConfig(iterations=iterations, seed=seed, eval_every=iterations)
            if method.startswith("finetune:"):
                _, record = finetune_single(zoo, int(method.split(":")[1]), train, config, setup.backbone, test)
            else:
                mode, _, size = method.partition("@")
                members = zoo[: int(size)] if size else zoo
                _, _, record = zoo_tune(members, train, replace(config, mode=mode), setup.backbone, test)
            out.add(method, record)
            log.info("%s seed %d: accuracy %.4f (%.0fs)", method, seed, record.final_metric, record.wall_clock)
    out.seconds = time.perf_counter() - started
    return out
