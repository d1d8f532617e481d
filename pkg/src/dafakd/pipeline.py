"""Teacher training, ensemble distillation and device-specific fine-tuning."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import FreqMixStyleConfig, MixupConfig, freq_mixstyle, mixup
from .data import DatasetSplit, DevicePart, LabeledBatch, batches
from .losses import DAFAConfig, KDConfig, cross_entropy, dafa_teacher_loss, kd_loss
from .model import (
    MLP,
    BudgetReport,
    ComplexityBudget,
    NetworkSpec,
    enforce_budget,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import ContractError, Tensor, no_grad, softmax_with_temperature

log = logging.getLogger(__name__)

# independent rng streams per purpose, keyed off the run seed
_INIT_STREAM = 1
_AUG_STREAM = 2


class BudgetError(ValueError):
    def __init__(self, report: BudgetReport):
        super().__init__("student exceeds complexity budget: " + "; ".join(report.violations))
        self.report = report


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("Adam eps must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 128
    peak_lr: float = 5e-4
    warmup_fraction: float = 0.1
    seed: int = 0
    optimizer: AdamConfig = AdamConfig()

    def __post_init__(self):
        # zero epochs is allowed: fine-tuning with no steps is a valid no-op
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.peak_lr < 0:
            raise ValueError("peak_lr must be nonnegative")


@dataclass(frozen=True)
class Augmentation:
    mixup: MixupConfig | None = None
    freq_mixstyle: FreqMixStyleConfig | None = None

    def __call__(self, batch: LabeledBatch, rng: np.random.Generator, freq_bins: int) -> LabeledBatch:
        if self.freq_mixstyle is not None:
            batch = freq_mixstyle(batch, self.freq_mixstyle, rng, freq_bins)
        if self.mixup is not None:
            batch = mixup(batch, self.mixup, rng)
        return batch


NO_AUGMENTATION = Augmentation()


@dataclass
class MetricRecord:
    stage: str
    epoch: int
    split: str
    loss: float
    accuracy: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


RecordSink = Callable[[MetricRecord], None]


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to exactly zero at the last step."""
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    warmup = cfg.warmup_fraction * total_steps
    last = total_steps - 1
    if step == last:
        return 0.0
    if step <= warmup:
        return cfg.peak_lr * step / warmup
    progress = (step - warmup) / (last - warmup)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], cfg: AdamConfig = AdamConfig()):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ContractError(f"no gradient for parameter(s) {missing}")
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


# -- generic loop --------------------------------------------------------------


def _accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(logits.argmax(axis=1) == targets.argmax(axis=1)) * 100.0)


def _fit(
    model: MLP,
    part: DevicePart,
    num_classes: int,
    freq_bins: int,
    cfg: TrainConfig,
    loss_fn: Callable[[MLP, LabeledBatch], tuple[Tensor, Tensor]],
    augment: Augmentation,
    stage: str,
    sink: RecordSink | None,
    on_epoch: Callable[[int, MLP], None] | None = None,
) -> list[MetricRecord]:
    n_batches = math.ceil(len(part) / cfg.batch_size)
    total = cfg.epochs * n_batches
    opt = Adam(model.parameters(), cfg.optimizer)
    rng = np.random.default_rng([cfg.seed, _AUG_STREAM])
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        loss_sum = correct = seen = 0.0
        for batch in batches(part, num_classes, cfg.batch_size, seed=cfg.seed, epoch=epoch):
            batch = augment(batch, rng, freq_bins)
            model.zero_grad()
            loss, logits = loss_fn(model, batch)
            loss.backward()
            opt.step(lr_at(step, total, cfg))
            step += 1
            loss_sum += loss.item() * len(batch)
            correct += _accuracy(logits.data, batch.targets) * len(batch)
            seen += len(batch)
        rec = MetricRecord(stage, epoch + 1, "train", loss_sum / seen, correct / seen)
        history.append(rec)
        if sink is not None:
            sink(rec)
        if on_epoch is not None:
            on_epoch(epoch + 1, model)
    return history


def initial_model(spec: NetworkSpec, seed: int) -> MLP:
    """The weights every training stage seeded with ``seed`` starts from."""
    return init_parameters(spec, np.random.default_rng([seed, _INIT_STREAM]))


# -- teachers ------------------------------------------------------------------


def train_teacher(
    split: DatasetSplit,
    spec: NetworkSpec,
    cfg: TrainConfig,
    mode: str = "ce_only",
    dafa_cfg: DAFAConfig = DAFAConfig(),
    augment: Augmentation = NO_AUGMENTATION,
    sink: RecordSink | None = None,
    stage: str | None = None,
) -> tuple[MLP, list[MetricRecord]]:
    """Train a teacher with plain cross-entropy (``ce_only``) or CE + DAFA (``dafa``)."""
    if mode not in ("ce_only", "dafa"):
        raise ValueError(f"unknown teacher mode {mode!r}")
    if mode == "dafa" and len(set(split.train.device_ids)) < 2:
        raise ValueError("DAFA training needs at least two devices in the training data")
    model = initial_model(spec, cfg.seed)

    if mode == "ce_only":
        def loss_fn(m, batch):
            out = m(batch.features)
            return cross_entropy(out.logits, batch.targets), out.logits
    else:
        def loss_fn(m, batch):
            out = m(batch.features)
            return dafa_teacher_loss(out.logits, out.embedding, batch.targets, batch.device_ids, dafa_cfg), out.logits

    history = _fit(model, split.train, split.num_classes, split.freq_bins, cfg, loss_fn, augment,
                   stage or f"teacher_{mode}", sink)
    return model, history


@dataclass(frozen=True)
class TeacherEnsemble:
    members: tuple

    def __post_init__(self):
        members = tuple(self.members)
        object.__setattr__(self, "members", members)
        if not members:
            raise ValueError("ensemble needs at least one teacher")
        classes = {m.spec.num_classes for m in members}
        if len(classes) != 1:
            raise ValueError(f"teachers disagree on class count: {sorted(classes)}")

    @property
    def num_classes(self) -> int:
        return self.members[0].spec.num_classes

    def checksums(self) -> list[str]:
        return [m.checksum() for m in self.members]


def ensemble_logits(ensemble: TeacherEnsemble, features) -> np.ndarray:
    """Arithmetic mean of member logits, computed without a graph."""
    with no_grad():
        total = None
        for m in ensemble.members:
            z = m(features).logits.data
            total = z.copy() if total is None else total + z
    return total / len(ensemble.members)


# -- student -------------------------------------------------------------------


def distill_student(
    split: DatasetSplit,
    student_spec: NetworkSpec,
    ensemble: TeacherEnsemble,
    kd_cfg: KDConfig,
    cfg: TrainConfig,
    budget: ComplexityBudget = ComplexityBudget(),
    augment: Augmentation = NO_AUGMENTATION,
    sink: RecordSink | None = None,
) -> tuple[MLP, list[MetricRecord]]:
    """Train the student on hard labels plus softened ensemble logits.

    Teachers see exactly the augmented batch the student sees.
    """
    report = enforce_budget(student_spec, budget)
    if not report.passed:
        raise BudgetError(report)
    if student_spec.num_classes != ensemble.num_classes:
        raise ValueError("student and teachers disagree on class count")
    model = initial_model(student_spec, cfg.seed)

    def loss_fn(m, batch):
        z_t = ensemble_logits(ensemble, batch.features)
        out = m(batch.features)
        return kd_loss(out.logits, z_t, batch.targets, kd_cfg), out.logits

    history = _fit(model, split.train, split.num_classes, split.freq_bins, cfg, loss_fn, augment,
                   "distill", sink)
    return model, history


# -- device-specific fine-tuning ---------------------------------------------------


@dataclass
class ModelBundle:
    base_student: MLP
    specialists: dict = field(default_factory=dict)  # device id -> MLP
    budget_reports: dict = field(default_factory=dict)  # "base" / device id -> BudgetReport
    warnings: list = field(default_factory=list)

    def model_for(self, device_id: str | None) -> MLP:
        return self.specialists.get(device_id, self.base_student)


def _part_accuracy(model: MLP, part: DevicePart) -> float:
    with no_grad():
        z = model(part.features).logits.data
    return float(np.mean(z.argmax(axis=1) == part.labels) * 100.0)


def dsft(
    base_student: MLP,
    split: DatasetSplit,
    cfg: TrainConfig,
    budget: ComplexityBudget = ComplexityBudget(),
    augment: Augmentation = NO_AUGMENTATION,
    sink: RecordSink | None = None,
) -> ModelBundle:
    """One fine-tuned copy of the base student per known device.

    Each specialist trains with plain cross-entropy on its device's training
    samples only. The kept weights come from the epoch (0 = untouched base)
    with the best accuracy on that device's validation samples; ties keep the
    earlier epoch.
    """
    bundle = ModelBundle(base_student)
    bundle.budget_reports["base"] = enforce_budget(base_student.spec, budget)
    known = [d for d in split.seen_devices]
    for device in known:
        train_part = split.train.for_device(device)
        if len(train_part) == 0:
            msg = f"no training samples for known device {device}; skipped"
            log.warning(msg)
            bundle.warnings.append(msg)
            continue
        val_part = split.validation.for_device(device)
        specialist = base_student.clone()
        if cfg.epochs > 0:
            best = {"acc": _part_accuracy(specialist, val_part) if len(val_part) else -1.0,
                    "params": [p.data.copy() for p in specialist.parameters()], "epoch": 0}

            def keep_best(epoch, m, best=best, val_part=val_part):
                if not len(val_part):
                    best["params"] = [p.data.copy() for p in m.parameters()]
                    return
                acc = _part_accuracy(m, val_part)
                if acc > best["acc"]:
                    best.update(acc=acc, params=[p.data.copy() for p in m.parameters()], epoch=epoch)

            def loss_fn(m, batch):
                out = m(batch.features)
                return cross_entropy(out.logits, batch.targets), out.logits

            _fit(specialist, train_part, split.num_classes, split.freq_bins, cfg, loss_fn, augment,
                 f"dsft_{device}", sink, on_epoch=keep_best)
            for p, saved in zip(specialist.parameters(), best["params"]):
                p.data = saved
            log.info("dsft %s: kept epoch %d", device, best["epoch"])
        bundle.specialists[device] = specialist
        bundle.budget_reports[device] = enforce_budget(specialist.spec, budget)
    return bundle


def predict(bundle: ModelBundle, features, device_id: str | None = None) -> np.ndarray:
    """Class probabilities from the specialist for ``device_id``, else the base student."""
    with no_grad():
        logits = bundle.model_for(device_id)(features).logits
        return softmax_with_temperature(logits, 1.0).data


# -- persistence -----------------------------------------------------------------


def save_bundle(bundle: ModelBundle, directory) -> dict:
    """Write ``base.ckpt``, one checkpoint per specialist and ``bundle.json``."""
    root = Path(directory)
    (root / "specialists").mkdir(parents=True, exist_ok=True)
    index = {"base": save_checkpoint(bundle.base_student, root / "base.ckpt"), "specialists": {}}
    for device, model in bundle.specialists.items():
        index["specialists"][device] = save_checkpoint(model, root / "specialists" / f"{device}.ckpt")
    index["warnings"] = list(bundle.warnings)
    (root / "bundle.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index


def load_bundle(directory, budget: ComplexityBudget = ComplexityBudget()) -> ModelBundle:
    root = Path(directory)
    index = json.loads((root / "bundle.json").read_text())
    bundle = ModelBundle(load_checkpoint(root / "base.ckpt"), warnings=list(index.get("warnings", [])))
    bundle.budget_reports["base"] = enforce_budget(bundle.base_student.spec, budget)
    for device in index["specialists"]:
        model = load_checkpoint(root / "specialists" / f"{device}.ckpt")
        bundle.specialists[device] = model
        bundle.budget_reports[device] = enforce_budget(model.spec, budget)
    return bundle
