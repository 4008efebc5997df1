"""Command-line entry point: ``zootune <subcommand> [flags]``.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 training failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .backbone import BackboneConfig, build_plain_backbone
from .complexity import report
from .data import (
    FACTORS,
    Dataset,
    composite_task,
    gen_synthetic_task,
    load_idx,
    single_factor_task,
    train_test_split,
    write_idx,
)
from .errors import ConfigError, TrainingError, ZooTuneError
from .io import (
    atomic_write,
    load_checkpoint,
    save_checkpoint,
    te_from_checkpoint,
    te_to_checkpoint,
    write_gates_csv,
    write_rows_csv,
    write_run_csv,
)
from .training import (
    TrainConfig,
    build_zoo_model,
    collapse,
    evaluate_accuracy,
    fit,
    model_checkpoint,
    model_from_checkpoint,
    run_baseline,
    zoo_tune,
)

log = logging.getLogger("zootune")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4
LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
CLI_MODES = {"full": "full", "lite": "lite", "avg-agg": "avg_agg", "no-align": "no_align"}


class UsageError(ZooTuneError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _stages(text: str) -> tuple[tuple[int, int], ...]:
    """``2x16,2x32`` -> ((2, 16), (2, 32))."""
    try:
        return tuple(tuple(int(v) for v in part.split("x")) for part in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected stages like 2x16,2x32, got {text!r}") from None


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# every option: dest -> (flags, kwargs, builtin default); defaults are applied after the config merge
_TRAIN_OPTS = {
    "lr": (["--lr"], {"type": float}, 0.01),
    "momentum": (["--momentum"], {"type": float}, 0.9),
    "batch_size": (["--batch-size"], {"type": int}, 16),
    "iterations": (["--iterations"], {"type": int}, 1000),
    "decay_at": (["--decay-at"], {"type": _floats}, (0.4, 0.8)),
    "decay_factor": (["--decay-factor"], {"type": float}, 0.1),
    "weight_decay": (["--weight-decay"], {"type": float}, 0.0),
    "eval_every": (["--eval-every"], {"type": int}, 100),
    "dtype": (["--dtype"], {"choices": ["single", "double"]}, "single"),
    "te_decay": (["--te-decay"], {"type": float}, 0.9),
}

_BACKBONE_OPTS = {
    "stem_channels": (["--stem-channels"], {"type": int}, 16),
    "stages": (["--stages"], {"type": _stages}, ((2, 16), (2, 32))),
    "align_pointwise": (["--align-pointwise"], {"type": _bool}, False),
}

_COMMON = {
    "seed": (["--seed"], {"type": int}, None),
}

_SUBCOMMANDS = {
    "synth": {
        **_COMMON,
        "task": (["--task"], {"choices": list(FACTORS) + ["composite"]}, None),
        "samples_per_class": (["--samples-per-class"], {"type": int}, 100),
        "noise": (["--noise"], {"type": float}, 0.1),
        "side": (["--side"], {"type": int}, 16),
        "levels": (["--levels"], {"type": int}, 2),
        "train_fraction": (["--train-fraction"], {"type": float}, 0.8),
        "out": (["--out"], {}, None),
    },
    "pretrain": {
        **_COMMON, **_TRAIN_OPTS, **_BACKBONE_OPTS,
        "data": (["--data"], {}, None),
        "out": (["--out"], {}, None),
        "name": (["--name"], {}, "source"),
        "run_csv": (["--run-csv"], {}, None),
    },
    "tune": {
        **_COMMON, **_TRAIN_OPTS,
        "zoo": (["--zoo"], {}, None),
        "data": (["--data"], {}, None),
        "mode": (["--mode"], {"choices": list(CLI_MODES)}, "full"),
        "out": (["--out"], {}, None),
        "te_out": (["--te-out"], {}, None),
        "gates_csv": (["--gates-csv"], {}, None),
        "run_csv": (["--run-csv"], {}, None),
    },
    "collapse": {
        **_COMMON,
        "model": (["--model"], {}, None),
        "te": (["--te"], {}, None),
        "out": (["--out"], {}, None),
    },
    "eval": {
        **_COMMON,
        "model": (["--model"], {}, None),
        "data": (["--data"], {}, None),
        "te": (["--te"], {}, None),
        "split": (["--split"], {"choices": ["train", "test"]}, "test"),
        "out": (["--out"], {}, None),
    },
    "complexity": {
        **_COMMON, **_BACKBONE_OPTS,
        "model": (["--model"], {}, None),
        "zoo_size": (["--zoo-size"], {"type": int}, 0),
        "mode": (["--mode"], {"choices": list(CLI_MODES)}, "full"),
        "classes": (["--classes"], {"type": int}, 8),
        "side": (["--side"], {"type": int}, 16),
        "in_channels": (["--in-channels"], {"type": int}, 3),
        "out": (["--out"], {}, None),
    },
    "baseline": {
        **_COMMON, **_TRAIN_OPTS,
        "kind": (["--kind"], {}, None),
        "zoo": (["--zoo"], {}, None),
        "data": (["--data"], {}, None),
        "out": (["--out"], {}, None),
        "run_csv": (["--run-csv"], {}, None),
        "metrics_csv": (["--metrics-csv"], {}, None),
    },
}

_REQUIRED = {
    "synth": ("seed", "task", "out"),
    "pretrain": ("seed", "data", "out"),
    "tune": ("seed", "zoo", "data", "out"),
    "collapse": ("model", "te", "out"),
    "eval": ("model", "data"),
    "complexity": ("seed", "out"),
    "baseline": ("seed", "kind", "zoo", "data"),
}

_HELP = {
    "synth": "generate a synthetic task as IDX files",
    "pretrain": "train a source model from scratch",
    "tune": "adapt a model zoo to a target task",
    "collapse": "fold a lite zoo model into one plain model",
    "eval": "report top-1 accuracy",
    "complexity": "write a MAC/parameter report",
    "baseline": "single-source fine-tune, ensemble or average aggregation",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zootune", description="Transfer from a zoo of pretrained models.")
    parser.add_argument("--version", action="version", version=f"zootune {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in _SUBCOMMANDS.items():
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", default=None, help="INI file; [train] and [<subcommand>] keys mirror flags")
        for dest, (flags, kwargs, _default) in opts.items():
            p.add_argument(*flags, dest=dest, default=None, **kwargs)
    return parser


def _convert(dest: str, raw: str, command: str):
    flags, kwargs, _ = _SUBCOMMANDS[command][dest]
    conv = kwargs.get("type", str)
    try:
        value = conv(raw)
    except (argparse.ArgumentTypeError, ValueError) as exc:
        raise UsageError(f"config key {dest}: {exc}") from None
    if "choices" in kwargs and value not in kwargs["choices"]:
        raise UsageError(f"config key {dest}: {value!r} not one of {kwargs['choices']}")
    return value


def _config_values(path: str, command: str) -> dict:
    """Keys from ``[train]``, ``[backbone]``, ``[common]`` and ``[<command>]`` that this command accepts."""
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    known = {d for opts in _SUBCOMMANDS.values() for d in opts}
    out = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            dest = key.replace("-", "_")
            if dest not in known:
                raise UsageError(f"{path}: unknown key {key!r} in [{section}]")
            if section in ("train", "backbone", "common", command) and dest in _SUBCOMMANDS[command]:
                out[dest] = _convert(dest, raw, command)
    return out


def resolve(argv) -> argparse.Namespace:
    """Parse flags, merge the config file beneath them and fill builtin defaults."""
    args = build_parser().parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required")
    file_values = _config_values(args.config, args.command) if args.config else {}
    for dest, (_, _, default) in _SUBCOMMANDS[args.command].items():
        if getattr(args, dest) is None:
            setattr(args, dest, file_values.get(dest, default))
    missing = [d for d in _REQUIRED[args.command] if getattr(args, d) is None]
    if missing:
        flags = ", ".join(_SUBCOMMANDS[args.command][d][0][0] for d in missing)
        raise UsageError(f"{args.command}: missing required {flags}")
    return args


def _train_config(args, mode: str = "full") -> TrainConfig:
    return TrainConfig(
        lr=args.lr, momentum=args.momentum, batch_size=args.batch_size, iterations=args.iterations,
        decay_at=tuple(args.decay_at), decay_factor=args.decay_factor, seed=args.seed, mode=mode,
        weight_decay=args.weight_decay, eval_every=args.eval_every, dtype=args.dtype, te_decay=args.te_decay,
    )


def _load_split(root, split: str) -> Dataset:
    root = Path(root)
    classes = None
    meta = root / "task.json"
    if meta.exists():
        classes = int(json.loads(meta.read_text())["classes"])
    return load_idx(root / f"{split}-images.idx", root / f"{split}-labels.idx", classes)


def _zoo(arg: str):
    paths = [p for p in arg.split(",") if p]
    if not paths:
        raise UsageError("--zoo needs at least one checkpoint")
    return [load_checkpoint(p) for p in paths]


def _zoo_backbone(zoo, target: Dataset) -> BackboneConfig:
    first = json.loads(zoo[0].metadata.get("config", "{}") or "{}")
    if not first:
        raise UsageError("first zoo checkpoint carries no backbone config")
    return replace(BackboneConfig.from_dict(first), classes=target.classes)


def _print_metric(value) -> None:
    print("accuracy n/a" if value is None else f"accuracy {value:.6f}")


def cmd_synth(args) -> int:
    kw = dict(noise=args.noise, samples_per_class=args.samples_per_class, seed=args.seed, side=args.side)
    spec = composite_task(args.levels, **kw) if args.task == "composite" else single_factor_task(args.task, **kw)
    ds = gen_synthetic_task(spec)
    train, test = train_test_split(ds, args.train_fraction, args.seed)
    out = Path(args.out)
    info = {"task": args.task, "classes": spec.classes, "train_fraction": args.train_fraction, **spec.to_dict()}
    write_idx(out / "train-images.idx", out / "train-labels.idx", train)
    write_idx(out / "test-images.idx", out / "test-labels.idx", test)
    with atomic_write(out / "task.json", "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
    log.info("wrote %d train / %d test items to %s", len(train), len(test), out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = _train_config(args)
    train, test = _load_split(args.data, "train"), _load_split(args.data, "test")
    backbone = BackboneConfig(
        in_channels=train.images.shape[1], stem_channels=args.stem_channels, stages=args.stages,
        classes=train.classes, side=train.images.shape[-1], align_pointwise=args.align_pointwise,
    )
    model = build_plain_backbone(backbone, config.seed, config.np_dtype)
    record = fit(model, train, config, eval_data=test)
    save_checkpoint(model_checkpoint(model, args.name, Path(args.data).name, args.seed), args.out)
    if args.run_csv:
        write_run_csv(record, args.run_csv)
    _print_metric(record.final_metric)
    return EXIT_OK


def cmd_tune(args) -> int:
    mode = CLI_MODES[args.mode]
    if args.te_out and mode != "lite":
        raise UsageError("--te-out only applies to --mode lite")
    config = _train_config(args, mode)
    zoo = _zoo(args.zoo)
    train, test = _load_split(args.data, "train"), _load_split(args.data, "test")
    backbone = _zoo_backbone(zoo, train)
    model, te, record = zoo_tune(zoo, train, config, backbone, eval_data=test)
    save_checkpoint(model_checkpoint(model, "zoo", Path(args.data).name, args.seed), args.out)
    if args.te_out:
        save_checkpoint(te_to_checkpoint(te), args.te_out)
    if args.gates_csv:
        write_gates_csv(record, args.gates_csv)
    if args.run_csv:
        write_run_csv(record, args.run_csv)
    _print_metric(record.final_metric)
    return EXIT_OK


def cmd_collapse(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.model))
    te = te_from_checkpoint(load_checkpoint(args.te))
    plain = collapse(model, te)
    save_checkpoint(model_checkpoint(plain, "collapsed"), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.model), seed=args.seed or 0)
    te = te_from_checkpoint(load_checkpoint(args.te)) if args.te else None
    data = _load_split(args.data, args.split)
    acc = evaluate_accuracy(model, data, te)
    if args.out:
        write_rows_csv(args.out, ("split", "accuracy"), [(args.split, format(acc, ".17g"))])
    _print_metric(acc)
    return EXIT_OK


def cmd_complexity(args) -> int:
    if args.model:
        model = model_from_checkpoint(load_checkpoint(args.model), seed=args.seed)
    else:
        backbone = BackboneConfig(
            in_channels=args.in_channels, stem_channels=args.stem_channels, stages=args.stages,
            classes=args.classes, side=args.side, align_pointwise=args.align_pointwise,
        )
        model = build_plain_backbone(backbone, args.seed)
        if args.zoo_size > 0:
            srcs = [build_plain_backbone(backbone, args.seed + i).state(include_head=False) for i in range(args.zoo_size)]
            model, _ = build_zoo_model(srcs, backbone, TrainConfig(seed=args.seed, mode=CLI_MODES[args.mode]))
    rep = report(model)
    rep.write_csv(args.out)
    for phase, total in rep.totals.items():
        print(f"{phase} macs {total.macs} flops {2 * total.macs} params {total.params}"
              f" gating_macs {total.gating_macs} gating_envelope_macs {total.gating_envelope_macs}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    kind = "avg_agg" if args.kind == "avg-agg" else args.kind
    config = _train_config(args, "avg_agg" if kind == "avg_agg" else "full")
    zoo = _zoo(args.zoo)
    train, test = _load_split(args.data, "train"), _load_split(args.data, "test")
    backbone = _zoo_backbone(zoo, train)
    if args.out and kind == "ensemble":
        raise UsageError("--out is not available for the ensemble baseline")
    metric, record, models = run_baseline(kind, zoo, train, config, backbone, eval_data=test)
    if args.out:
        save_checkpoint(model_checkpoint(models[0], kind, Path(args.data).name, args.seed), args.out)
    if args.run_csv:
        write_run_csv(record, args.run_csv)
    if args.metrics_csv:
        write_rows_csv(args.metrics_csv, ("kind", "accuracy"), [(args.kind, format(metric, ".17g"))])
    _print_metric(metric)
    return EXIT_OK

COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "tune": cmd_tune,
    "collapse": cmd_collapse,
    "eval": cmd_eval,
    "complexity": cmd_complexity,
    "baseline": cmd_baseline,
}


def _setup_logging() -> None:
    level = os.environ.get("ZOOTUNE_LOG", "quiet").strip().lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"ZOOTUNE_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    log.setLevel(LOG_LEVELS[level])
    if not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        log.addHandler(handler)


def run(argv=None) -> int:
    """Execute one command; returns the process exit code."""
    try:
        _setup_logging()
        args = resolve(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (ZooTuneError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
