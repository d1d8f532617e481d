"""Command-line entry point: ``dafakd {generate,run,gradcheck,budget,eval}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigBudgetError, ConfigError, ExperimentConfig, load_config
from .data import DatasetFormatError, generate, read_dataset, write_dataset
from .evaluation import delta, evaluate, render
from .gradcheck import standard_suite
from .model import CheckpointFormatError, enforce_budget, load_checkpoint, save_checkpoint
from .pipeline import (
    BudgetError,
    ModelBundle,
    TeacherEnsemble,
    distill_student,
    dsft,
    load_bundle,
    save_bundle,
    train_teacher,
)

log = logging.getLogger("dafakd")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_IO = 4
EXIT_GRADCHECK = 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _versions() -> dict:
    return {"dafakd": __version__, "numpy": np.__version__}


def _load(args, check_budget: bool = True) -> ExperimentConfig:
    if args.config is None:
        cfg = ExperimentConfig()
    else:
        try:
            cfg = load_config(args.config, check_budget)
        except ConfigBudgetError as exc:
            raise CliError(f"budget failure: {exc}", EXIT_BUDGET) from exc
        except ConfigError as exc:
            raise CliError(f"config error: {exc}", EXIT_CONFIG) from exc
    return cfg.with_overrides(seed=getattr(args, "seed", None), output_dir=getattr(args, "out", None))


def _check_budget(cfg: ExperimentConfig) -> None:
    report = enforce_budget(cfg.student_spec(), cfg.budget)
    if not report.passed:
        raise CliError("budget failure: " + "; ".join(report.violations), EXIT_BUDGET)


def _generate_split(cfg: ExperimentConfig):
    d = cfg.data
    try:
        return generate(d.scene(), d.devices(cfg.seed), d.train_per_cell, d.validation_per_cell, seed=cfg.seed)
    except ValueError as exc:
        raise CliError(f"config error: {exc}", EXIT_CONFIG) from exc


def _read_split(path):
    try:
        return read_dataset(path)
    except FileNotFoundError as exc:
        raise CliError(f"I/O error: dataset file not found: {path}", EXIT_IO) from exc
    except (OSError, DatasetFormatError) as exc:
        raise CliError(f"I/O error: cannot read dataset {path}: {exc}", EXIT_IO) from exc


# -- generate ------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _load(args)
    out = Path(args.dataset_out)
    manifest = out.with_name(out.name + ".manifest.json")
    if out.exists() and not args.force:
        raise CliError(f"I/O error: {out} exists (use --force to overwrite)", EXIT_IO)
    split = _generate_split(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = write_dataset(split, out)
    manifest.write_text(_json({
        "dataset": out.name,
        "sha256": digest,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "versions": _versions(),
    }))
    print(f"wrote {out} ({len(split.train)} train / {len(split.validation)} validation records) sha256={digest}")
    return EXIT_OK


# -- run -----------------------------------------------------------------------


class _Stages:
    """Checkpoint bookkeeping: a stage is reused when its key and file hash match."""

    def __init__(self, root: Path):
        self.root = root
        self.path = root / "stages.json"
        self.state = json.loads(self.path.read_text()) if self.path.exists() else {}

    def cached(self, name: str, key: str, path: Path) -> bool:
        entry = self.state.get(name)
        return bool(entry and entry["key"] == key and path.exists() and _sha256(path) == entry["sha256"])

    def record(self, name: str, key: str, path: Path) -> None:
        self.state[name] = {"key": key, "sha256": _sha256(path)}
        self.path.write_text(_json(self.state))


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


def cmd_run(args) -> int:
    cfg = _load(args)
    _check_budget(cfg)
    root = Path(cfg.output_dir)
    for sub in ("teachers", "student", "reports", "metrics"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    stages = _Stages(root)
    cfg_dict = cfg.to_dict()

    # dataset
    if cfg.data.dataset_path:
        data_path = Path(cfg.data.dataset_path)
        split = _read_split(data_path)
    else:
        data_path = root / "dataset.dafa"
        key = _key(cfg_dict["data"], cfg.seed)
        if stages.cached("dataset", key, data_path):
            split = _read_split(data_path)
        else:
            split = _generate_split(cfg)
            write_dataset(split, data_path)
            stages.record("dataset", key, data_path)
    data_hash = _sha256(data_path)
    log.info("dataset %s: %d train, %d validation", data_path, len(split.train), len(split.validation))

    def metrics_sink(name):
        path = root / "metrics" / f"{name}.jsonl"
        fh = path.open("w")
        return fh, lambda rec: fh.write(rec.to_json() + "\n")

    # teachers
    teachers = []
    for i, mode in enumerate(cfg.ensemble.members):
        name = f"teacher{i}_{mode}"
        path = root / "teachers" / f"{name}.ckpt"
        key = _key(data_hash, cfg_dict["teacher"], cfg_dict["train_teacher"], cfg_dict["dafa"], mode,
                   cfg_dict["mixup"], cfg_dict["freq_mixstyle"], cfg_dict["augmentation"], cfg.stage_seed("teacher", i))
        if stages.cached(name, key, path):
            log.info("reusing %s", path)
            teachers.append(load_checkpoint(path))
            continue
        log.info("training %s", name)
        fh, sink = metrics_sink(name)
        with fh:
            model, _ = train_teacher(split, cfg.teacher_spec(), cfg.train_teacher.build(cfg.stage_seed("teacher", i)),
                                     mode, cfg.dafa, cfg.augment_for("teacher"), sink, stage=name)
        save_checkpoint(model, path)
        stages.record(name, key, path)
        teachers.append(model)
    ensemble = TeacherEnsemble(tuple(teachers))

    # distillation
    path = root / "student" / "base.ckpt"
    key = _key(data_hash, [m.checksum() for m in teachers], cfg_dict["student"], cfg_dict["kd"],
               cfg_dict["train_distill"], cfg_dict["budget"], cfg_dict["mixup"], cfg_dict["freq_mixstyle"],
               cfg_dict["augmentation"], cfg.stage_seed("distill"))
    if stages.cached("distill", key, path):
        log.info("reusing %s", path)
        student = load_checkpoint(path)
    else:
        log.info("distilling student")
        fh, sink = metrics_sink("distill")
        try:
            with fh:
                student, _ = distill_student(split, cfg.student_spec(), ensemble, cfg.kd,
                                             cfg.train_distill.build(cfg.stage_seed("distill")), cfg.budget,
                                             cfg.augment_for("distill"), sink)
        except BudgetError as exc:
            raise CliError(f"budget failure: {exc}", EXIT_BUDGET) from exc
        save_checkpoint(student, path)
        stages.record("distill", key, path)

    # device-specific fine-tuning
    bundle_dir = root / "bundle"
    if args.skip_dsft:
        bundle = ModelBundle(student)
        bundle.budget_reports["base"] = enforce_budget(student.spec, cfg.budget)
    else:
        log.info("device-specific fine-tuning")
        fh, sink = metrics_sink("dsft")
        with fh:
            bundle = dsft(student, split, cfg.train_dsft.build(cfg.stage_seed("dsft")), cfg.budget,
                          cfg.augment_for("dsft"), sink)
    save_bundle(bundle, bundle_dir)

    # reports
    meta = {"config_hash": cfg.hash(), "dataset_sha256": data_hash, "seed": cfg.seed}
    before = evaluate(bundle.base_student, split, stage="After Distillation", model_id="base")
    after = evaluate(bundle, split, use_device_labels=not args.no_device_labels,
                     stage="After DSFT" if bundle.specialists else "After DSFT (skipped)", model_id="bundle")
    before.metadata.update(meta)
    after.metadata.update(meta)
    d = delta(before, after)
    reports = root / "reports"
    (reports / "before.json").write_text(render(before, "structured"))
    (reports / "after.json").write_text(render(after, "structured"))
    (reports / "delta.json").write_text(render(d, "structured"))
    (reports / "delta.txt").write_text(render(d, "table"))

    manifest = {
        "config_hash": cfg.hash(),
        "config": {k: v for k, v in cfg_dict.items() if k != "output_dir"},
        "seed": cfg.seed,
        "dataset": {"path": str(data_path) if cfg.data.dataset_path else data_path.name, "sha256": data_hash},
        "teachers": [m.checksum() for m in teachers],
        "student": student.checksum(),
        "bundle": json.loads((bundle_dir / "bundle.json").read_text()),
        "reports": {p.name: _sha256(p) for p in sorted(reports.iterdir())},
        "versions": _versions(),
    }
    (root / "manifest.json").write_text(_json(manifest))
    print(render(d, "table"), end="")
    return EXIT_OK


# -- gradcheck / budget / eval ---------------------------------------------------


def cmd_gradcheck(args) -> int:
    results = standard_suite(seed=args.seed if args.seed is not None else 0)
    failed = 0
    for r in results:
        ok = r.passed
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {r.name:<40} {r.detail}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_GRADCHECK


def cmd_budget(args) -> int:
    cfg = _load(args, check_budget=False)
    spec = cfg.teacher_spec() if args.teacher else cfg.student_spec()
    report = enforce_budget(spec, cfg.budget)
    print(f"network: {spec.input_dim} -> {list(spec.hidden_dims)} -> {spec.embedding_dim} -> {spec.num_classes}")
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_BUDGET


def cmd_eval(args) -> int:
    split = _read_split(args.dataset)
    bundle_dir = Path(args.bundle)
    if not (bundle_dir / "bundle.json").exists():
        raise CliError(f"I/O error: no bundle.json in {bundle_dir}", EXIT_IO)
    try:
        bundle = load_bundle(bundle_dir)
    except (OSError, CheckpointFormatError, ValueError) as exc:
        raise CliError(f"I/O error: cannot load bundle {bundle_dir}: {exc}", EXIT_IO) from exc
    report = evaluate(bundle, split, use_device_labels=not args.no_device_labels,
                      stage="base routing" if args.no_device_labels else "device routing", model_id=str(bundle_dir))
    text = render(report, args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dafakd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset file")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="dataset_out", required=True, help="dataset file to write")
    p.add_argument("--force", action="store_true", help="overwrite an existing file")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="teachers -> distillation -> DSFT -> reports")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--skip-dsft", action="store_true")
    p.add_argument("--no-device-labels", action="store_true", help="route every sample to the base student")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every loss and layer")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("budget", help="parameter / MAC report against the complexity budget")
    p.add_argument("--config")
    p.add_argument("--teacher", action="store_true", help="report the teacher network instead")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("eval", help="evaluate a saved bundle on a dataset file")
    p.add_argument("--bundle", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--no-device-labels", action="store_true")
    p.add_argument("--format", choices=("table", "structured"), default="table")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"dafakd: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
