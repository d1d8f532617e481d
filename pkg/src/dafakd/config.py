"""Experiment configuration: one YAML file, one flat section per component.

Unknown keys are rejected so that a typo in a hyperparameter fails loudly
instead of silently falling back to a default.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .augment import FreqMixStyleConfig, MixupConfig
from .data import SceneSpec, default_devices
from .losses import DAFAConfig, KDConfig
from .model import ComplexityBudget, NetworkSpec, enforce_budget
from .pipeline import AdamConfig, Augmentation, TrainConfig


class ConfigError(ValueError):
    pass


class ConfigBudgetError(ConfigError):
    """The configured student exceeds the complexity budget."""

    def __init__(self, report):
        super().__init__("student " + "; ".join(report.violations))
        self.report = report


@dataclass(frozen=True)
class DataSection:
    num_classes: int = 10
    freq_bins: int = 16
    time_frames: int = 8
    prototype_scale: float = 0.04
    within_class_noise: float = 0.04
    modes_per_class: int = 4
    offset_scale: float = 0.2
    gain_tilt: float = 2.0
    gain_ripple: float = 1.0
    noise_min: float = 0.04
    noise_max: float = 0.2
    train_per_cell: int = 40
    validation_per_cell: int = 20
    dataset_path: str | None = None

    def scene(self) -> SceneSpec:
        return SceneSpec(self.num_classes, self.freq_bins, self.time_frames, self.prototype_scale,
                         self.within_class_noise, self.modes_per_class)

    def devices(self, seed: int):
        return default_devices(self.freq_bins, seed, self.offset_scale, self.gain_tilt, self.gain_ripple,
                               (self.noise_min, self.noise_max))


@dataclass(frozen=True)
class NetSection:
    hidden_dims: tuple = ()
    embedding_dim: int = 32


@dataclass(frozen=True)
class EnsembleSection:
    members: tuple = ("ce_only", "dafa")


@dataclass(frozen=True)
class AugSwitch:
    enabled: bool = True
    alpha: float = 0.3
    apply_probability: float = 1.0


@dataclass(frozen=True)
class AugStages:
    teacher: bool = True
    distill: bool = True
    dsft: bool = False


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 500
    batch_size: int = 128
    peak_lr: float = 5e-4
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.peak_lr, self.warmup_fraction, seed,
                           AdamConfig(self.beta1, self.beta2, self.eps))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataSection = DataSection()
    teacher: NetSection = NetSection((256, 128), 64)
    student: NetSection = NetSection((128, 64), 32)
    ensemble: EnsembleSection = EnsembleSection()
    kd: KDConfig = KDConfig()
    dafa: DAFAConfig = DAFAConfig()
    mixup: AugSwitch = AugSwitch(True, 0.3, 1.0)
    freq_mixstyle: AugSwitch = AugSwitch(True, 0.3, 0.4)
    augmentation: AugStages = AugStages()
    train_teacher: TrainSection = TrainSection()
    train_distill: TrainSection = TrainSection()
    train_dsft: TrainSection = TrainSection(epochs=100, peak_lr=1e-5)
    budget: ComplexityBudget = ComplexityBudget()

    # -- derived objects -----------------------------------------------------

    def teacher_spec(self) -> NetworkSpec:
        return self._spec(self.teacher)

    def student_spec(self) -> NetworkSpec:
        return self._spec(self.student)

    def _spec(self, net: NetSection) -> NetworkSpec:
        d = self.data
        return NetworkSpec(d.freq_bins * d.time_frames, tuple(net.hidden_dims), net.embedding_dim, d.num_classes)

    def augment_for(self, stage: str) -> Augmentation:
        if not getattr(self.augmentation, stage):
            return Augmentation()
        mix = MixupConfig(self.mixup.alpha, self.mixup.apply_probability) if self.mixup.enabled else None
        fms = (FreqMixStyleConfig(self.freq_mixstyle.alpha, self.freq_mixstyle.apply_probability)
               if self.freq_mixstyle.enabled else None)
        return Augmentation(mix, fms)

    def stage_seed(self, stage: str, index: int = 0) -> int:
        offsets = {"teacher": 10, "distill": 20, "dsft": 30}
        return self.seed * 1000 + offsets[stage] + index

    def to_dict(self) -> dict:
        out = asdict(self)
        for net in ("teacher", "student"):
            out[net]["hidden_dims"] = list(out[net]["hidden_dims"])
        out["ensemble"]["members"] = list(out["ensemble"]["members"])
        return out

    def hash(self) -> str:
        """Digest of every setting that can change results (the output location cannot)."""
        doc = self.to_dict()
        del doc["output_dir"]
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if output_dir is not None:
            cfg = replace(cfg, output_dir=output_dir)
        return cfg


def _check_type(where: str, name: str, value, default) -> None:
    if default is None:
        ok = value is None or isinstance(value, str)
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"'{where}.{name}' has wrong type {type(value).__name__}")


def _build(default, raw, where: str):
    if raw is None:
        return default
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{where}' must be a mapping")
    known = {f.name for f in fields(default)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{where}': {', '.join(unknown)}")
    values = {f.name: getattr(default, f.name) for f in fields(default)}
    for name, value in raw.items():
        _check_type(where, name, value, values[name])
        values[name] = tuple(value) if isinstance(value, list) else value
    try:
        return type(default)(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{where}' section: {exc}") from exc


_SECTIONS = (
    "data", "teacher", "student", "ensemble", "kd", "dafa", "mixup", "freq_mixstyle",
    "augmentation", "train_teacher", "train_distill", "train_dsft", "budget",
)


def from_dict(raw: dict, check_budget: bool = True) -> ExperimentConfig:
    """Build a config from parsed YAML; omitted keys keep the shipped defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"seed", "output_dir"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    base = ExperimentConfig()
    values = {name: _build(getattr(base, name), raw[name], name) for name in _SECTIONS if name in raw}
    if "seed" in raw:
        _check_type("config", "seed", raw["seed"], 0)
        values["seed"] = raw["seed"]
    if "output_dir" in raw:
        _check_type("config", "output_dir", raw["output_dir"], None)
        values["output_dir"] = raw["output_dir"]
    cfg = replace(base, **values)
    validate(cfg)
    if check_budget:
        report = budget_check(cfg)
        if not report.passed:
            raise ConfigBudgetError(report)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    members = cfg.ensemble.members
    if not members or any(m not in ("ce_only", "dafa") for m in members):
        raise ConfigError(f"ensemble members must be 'ce_only' or 'dafa', got {list(members)}")
    try:
        cfg.data.scene()
        cfg.teacher_spec()
        cfg.student_spec()
        for section in (cfg.train_teacher, cfg.train_distill, cfg.train_dsft):
            section.build(0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.data.noise_min > cfg.data.noise_max:
        raise ConfigError("data.noise_min exceeds data.noise_max")


def budget_check(cfg: ExperimentConfig):
    return enforce_budget(cfg.student_spec(), cfg.budget)


def load_config(path, check_budget: bool = True) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return from_dict(raw, check_budget)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
