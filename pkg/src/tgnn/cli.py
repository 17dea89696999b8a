"""Command-line entry point: ``tgnn {generate,train,distill,eval,cv,report}``.

Every command writes exactly one ``manifest.json`` into its ``--out``
directory. Exit codes: 2 for configuration problems, 3 for unreadable or
invalid data, 4 for numeric failures during training.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .autodiff import NumericError
from .checkpoint import CheckpointError
from .config import ConfigError, TrainConfig, load_config
from .data import (
    Dataset,
    GeneratorConfig,
    ParseError,
    dumps_splits,
    load_dataset,
    make_splits,
    save_dataset,
    synth_generate,
)
from .model import TgnnModel
from .train import (
    VARIANTS,
    MetricsReport,
    TrainingError,
    attention_report,
    cross_validate,
    distill,
    evaluate,
    model_for,
    predict_soft_labels,
    train,
)

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
log = logging.getLogger("tgnn")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    fingerprints: dict[str, str] = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    version: str = __version__

    def write(self, out: Path) -> Path:
        for name, rel in self.outputs.items():
            self.fingerprints[name] = file_sha256(out / rel)
        self.finished = _now()
        path = out / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ------------------------------------------------------------------- helpers

TRAIN_FLAGS = (("batch_size", int), ("epochs", int), ("lr", float), ("l2", float), ("dropout", float))


def _resolve(args) -> tuple[TrainConfig, GeneratorConfig]:
    if args.config:
        if not Path(args.config).exists():
            raise CliError(f"config file not found: {args.config}", EXIT_CONFIG)
        cfg, gen = load_config(args.config)
    else:
        cfg, gen = TrainConfig(), GeneratorConfig()
    for name, _ in TRAIN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "jobs", 1) < 1:
        raise ConfigError("--jobs must be >= 1")
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg, gen


def _load_data(path) -> Dataset:
    if path is None:
        raise CliError("--data is required", EXIT_CONFIG)
    p = Path(path)
    if p.is_dir():
        p = p / "dataset.jsonl"
    if not p.exists():
        raise CliError(f"dataset not found: {p}", EXIT_DATA)
    return load_dataset(p)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pick_fold(dataset: Dataset, args, cfg: TrainConfig):
    plan = make_splits(dataset, args.mode, cfg.seed, cfg.tune_fraction)
    name = args.fold or next(iter(plan.folds))
    if name not in plan.folds:
        raise ConfigError(f"unknown fold {name!r}; choose from {sorted(plan.folds)}")
    args.fold = name
    return plan, name, plan.folds[name]


def _write_metrics(out: Path, report: MetricsReport, stem: str = "metrics") -> list[str]:
    (out / f"{stem}.tsv").write_text(report.table(), encoding="utf-8")
    (out / f"{stem}.json").write_text(report.to_json(), encoding="utf-8")
    return [f"{stem}.tsv", f"{stem}.json"]


def _manifest(command: str, args, cfg: Optional[TrainConfig], gen: Optional[GeneratorConfig] = None) -> RunManifest:
    config = {}
    if cfg is not None:
        config["train"] = cfg.to_dict()
    if gen is not None:
        config["generator"] = asdict(gen)
    for key in ("mode", "fold", "k", "jobs", "variants", "student_text_only"):
        if hasattr(args, key):
            config[key] = getattr(args, key)
    seed = cfg.seed if cfg is not None else args.seed
    return RunManifest(command, config, seed, started=_now())


def _inputs(args) -> dict[str, str]:
    keys = ("config", "data", "checkpoint", "teacher_checkpoint")
    return {k: str(getattr(args, k)) for k in keys if getattr(args, k, None)}


# ------------------------------------------------------------------ commands

def cmd_generate(args) -> int:
    if args.config:
        if not Path(args.config).exists():
            raise CliError(f"config file not found: {args.config}", EXIT_CONFIG)
        _, gen = load_config(args.config)
    else:
        gen = GeneratorConfig()
    seed = 0 if args.seed is None else args.seed
    out = _out(args)
    dataset = synth_generate(gen, seed)
    save_dataset(dataset, out / "dataset.jsonl")
    (out / "events.json").write_text(json.dumps(dataset.manifest(), indent=1) + "\n", encoding="utf-8")
    man = RunManifest("generate", {"generator": asdict(gen)}, seed, _inputs(args), started=_now())
    man.outputs = {"dataset": "dataset.jsonl", "events": "events.json"}
    man.write(out)
    print(f"wrote {len(dataset)} conversations over {len(dataset.events())} events to {out}")
    return 0


def cmd_train(args) -> int:
    cfg, _ = _resolve(args)
    dataset = _load_data(args.data)
    plan, name, fold = _pick_fold(dataset, args, cfg)
    out = _out(args)
    man = _manifest("train", args, cfg)
    man.inputs = _inputs(args)
    model = model_for(cfg, multimodal=False if args.student_text_only else cfg.model.multimodal)
    model, history = train(model, dataset, fold, cfg)
    report = MetricsReport({name: evaluate(model, dataset, fold.test)})
    model.save(out / "model.ckpt", {"fold": name, "mode": args.mode})
    (out / "history.jsonl").write_text(history.dumps(), encoding="utf-8")
    (out / "splits.jsonl").write_text(dumps_splits(plan), encoding="utf-8")
    files = _write_metrics(out, report)
    man.outputs = {"checkpoint": "model.ckpt", "history": "history.jsonl", "splits": "splits.jsonl",
                   "metrics_table": files[0], "metrics": files[1]}
    man.write(out)
    print(report.table(), end="")
    return 0


def cmd_distill(args) -> int:
    if not args.teacher_checkpoint:
        raise CliError("distill needs a trained teacher: run `tgnn train` (multimodal) first, "
                       "then pass its model.ckpt via --teacher-checkpoint", EXIT_CONFIG)
    if not Path(args.teacher_checkpoint).exists():
        raise CliError(f"teacher checkpoint not found: {args.teacher_checkpoint}; "
                       "run `tgnn train` before `tgnn distill`", EXIT_CONFIG)
    cfg, _ = _resolve(args)
    dataset = _load_data(args.data)
    plan, name, fold = _pick_fold(dataset, args, cfg)
    teacher, meta = TgnnModel.load(args.teacher_checkpoint)
    if not teacher.cfg.multimodal:
        raise CliError("the teacher checkpoint is text-only; train the multimodal teacher first", EXIT_CONFIG)
    if meta.get("fold") not in (None, name):
        raise CliError(f"teacher was trained on fold {meta['fold']!r}, not {name!r}", EXIT_CONFIG)
    out = _out(args)
    man = _manifest("distill", args, cfg)
    man.inputs = _inputs(args)
    store = predict_soft_labels(teacher, dataset, fold.train)
    student, history = distill(model_for(cfg, multimodal=False), dataset, fold, store, cfg)
    report = MetricsReport({name: evaluate(student, dataset, fold.test)})
    student.save(out / "model.ckpt", {"fold": name, "mode": args.mode, "teacher": store.fingerprint})
    (out / "soft_labels.jsonl").write_text(store.dumps(), encoding="utf-8")
    (out / "history.jsonl").write_text(history.dumps(), encoding="utf-8")
    files = _write_metrics(out, report)
    man.outputs = {"checkpoint": "model.ckpt", "soft_labels": "soft_labels.jsonl", "history": "history.jsonl",
                   "metrics_table": files[0], "metrics": files[1]}
    man.write(out)
    print(report.table(), end="")
    return 0


def _load_checkpoint(path) -> tuple[TgnnModel, dict]:
    if not path:
        raise CliError("--checkpoint is required", EXIT_CONFIG)
    if not Path(path).exists():
        raise CliError(f"checkpoint not found: {path}", EXIT_DATA)
    return TgnnModel.load(path)


def cmd_eval(args) -> int:
    cfg, _ = _resolve(args)
    dataset = _load_data(args.data)
    model, meta = _load_checkpoint(args.checkpoint)
    if args.fold is None and meta.get("fold") is not None and meta.get("mode") == args.mode:
        args.fold = meta["fold"]
    _, name, fold = _pick_fold(dataset, args, cfg)
    out = _out(args)
    man = _manifest("eval", args, cfg)
    man.inputs = _inputs(args)
    report = MetricsReport({name: evaluate(model, dataset, fold.test)})
    files = _write_metrics(out, report)
    man.outputs = {"metrics_table": files[0], "metrics": files[1]}
    man.write(out)
    print(report.table(), end="")
    return 0


def cmd_cv(args) -> int:
    cfg, _ = _resolve(args)
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    bad = set(variants) - set(VARIANTS)
    if bad or not variants:
        raise ConfigError(f"--variants must be drawn from {list(VARIANTS)}, got {args.variants!r}")
    dataset = _load_data(args.data)
    plan = make_splits(dataset, args.mode, cfg.seed, cfg.tune_fraction)
    out = _out(args)
    man = _manifest("cv", args, cfg)
    man.inputs = _inputs(args)
    reports = cross_validate(dataset, cfg, plan, variants, jobs=args.jobs)
    (out / "splits.jsonl").write_text(dumps_splits(plan), encoding="utf-8")
    man.outputs["splits"] = "splits.jsonl"
    for v, report in reports.items():
        tsv, js = _write_metrics(out, report, f"metrics_{v}")
        man.outputs[f"{v}_table"], man.outputs[v] = tsv, js
        print(f"# {v}")
        print(report.table(), end="")
    man.write(out)
    return 0


def cmd_report(args) -> int:
    if args.k < 1:
        raise ConfigError("--k must be >= 1")
    dataset = _load_data(args.data)
    model, _ = _load_checkpoint(args.checkpoint)
    out = _out(args)
    man = RunManifest("report", {"k": args.k}, 0 if args.seed is None else args.seed, _inputs(args), started=_now())
    lines = [json.dumps(attention_report(model, dataset, cid, args.k), ensure_ascii=False) for cid in dataset.ids()]
    (out / "attention.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    man.outputs = {"attention": "attention.jsonl"}
    man.write(out)
    print(f"wrote {len(lines)} attention records to {out / 'attention.jsonl'}")
    return 0


# -------------------------------------------------------------------- parser

class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show ``(default: ...)`` only for options that have a concrete default."""

    def _get_help_string(self, action):
        if action.default is None or action.default is False or "default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="tgnn", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"tgnn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", default=None, help="INI config with [model], [train], [generator] sections")
        if data:
            p.add_argument("--data", default=None, help="dataset.jsonl (or its directory)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed, overrides the config value (default: 0)")
        p.add_argument("-v", "--verbose", action="store_true", help="per-epoch log lines on stderr")

    def training(p):
        d = TrainConfig()
        p.add_argument("--mode", choices=("loeo", "ratio"), default="loeo", help="split mode")
        p.add_argument("--fold", default=None, help="fold name (an event in loeo mode); first fold if omitted")
        for name, kind in TRAIN_FLAGS:
            p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind, default=None,
                           help=f"overrides the config value (default: {getattr(d, name)})")

    p = sub.add_parser("generate", help="write the synthetic benchmark", formatter_class=fmt)
    common(p, data=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model on one fold", formatter_class=fmt)
    common(p)
    training(p)
    p.add_argument("--student-text-only", action="store_true", help="train the text-only variant")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="train the text-only student from a teacher checkpoint", formatter_class=fmt)
    common(p)
    training(p)
    p.add_argument("--teacher-checkpoint", default=None, help="model.ckpt written by `tgnn train`")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="score a checkpoint on a fold's test set", formatter_class=fmt)
    common(p)
    training(p)
    p.add_argument("--checkpoint", default=None, help="model checkpoint to evaluate")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="cross-validate across folds", formatter_class=fmt)
    common(p)
    training(p)
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    p.add_argument("--variants", default="teacher", help=f"comma list from {','.join(VARIANTS)}")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("report", help="top-k global-local attention replies per conversation", formatter_class=fmt)
    common(p)
    p.add_argument("--checkpoint", default=None, help="model checkpoint")
    p.add_argument("--k", type=int, default=5, help="replies kept per conversation")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except (ParseError, CheckpointError, FileNotFoundError, KeyError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except (NumericError, TrainingError) as exc:
        code, msg = EXIT_NUMERIC, f"numeric error: {exc}"
    print(f"tgnn: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
