"""Per-device evaluation, before/after deltas and report rendering.

Reports are laid out like the challenge tables: one column per device in
roster order plus an Overall column, and aggregate rows for the real, seen
and unseen device groups.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DatasetSplit, part_hash
from .model import MLP
from .pipeline import ModelBundle
from .tensor import no_grad, softmax_with_temperature

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-15
GROUPS = ("overall", "real", "seen", "unseen")


@dataclass
class DeviceMetrics:
    accuracy: float  # percent
    log_loss: float
    count: int
    routed_to: str = "base"  # "base" or "specialist"


@dataclass
class EvalReport:
    per_device: dict  # device id -> DeviceMetrics, roster order
    aggregates: dict  # group name -> DeviceMetrics (routed_to unused)
    roster: list
    split_hash: str
    stage: str = ""
    model_id: str = ""
    metadata: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "kind": "eval",
            "stage": self.stage,
            "model_id": self.model_id,
            "split_hash": self.split_hash,
            "roster": list(self.roster),
            "per_device": {d: asdict(m) for d, m in self.per_device.items()},
            "aggregates": {g: asdict(m) for g, m in self.aggregates.items()},
            "metadata": dict(self.metadata),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> EvalReport:
        return cls(
            per_device={d: DeviceMetrics(**m) for d, m in doc["per_device"].items()},
            aggregates={g: DeviceMetrics(**m) for g, m in doc["aggregates"].items()},
            roster=list(doc["roster"]),
            split_hash=doc["split_hash"],
            stage=doc.get("stage", ""),
            model_id=doc.get("model_id", ""),
            metadata=dict(doc.get("metadata", {})),
            warnings=list(doc.get("warnings", [])),
        )


@dataclass
class DeltaReport:
    before: EvalReport
    after: EvalReport
    per_device: dict  # device id -> accuracy delta (after - before), None if base in both stages
    log_loss: dict  # device id -> log-loss delta
    aggregates: dict  # group -> accuracy delta

    def to_dict(self) -> dict:
        return {
            "kind": "delta",
            "before": self.before.to_dict(),
            "after": self.after.to_dict(),
            "per_device": dict(self.per_device),
            "log_loss": dict(self.log_loss),
            "aggregates": dict(self.aggregates),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> DeltaReport:
        return cls(
            EvalReport.from_dict(doc["before"]),
            EvalReport.from_dict(doc["after"]),
            dict(doc["per_device"]),
            dict(doc["log_loss"]),
            dict(doc["aggregates"]),
        )


def _weighted(cells: list[DeviceMetrics]) -> DeviceMetrics | None:
    total = sum(c.count for c in cells)
    if total == 0:
        return None
    acc = math.fsum(c.accuracy * c.count for c in cells) / total
    loss = math.fsum(c.log_loss * c.count for c in cells) / total
    return DeviceMetrics(acc, loss, total, "")


def evaluate(
    bundle: ModelBundle | MLP,
    split: DatasetSplit,
    use_device_labels: bool = True,
    stage: str = "",
    model_id: str = "",
) -> EvalReport:
    """Accuracy and log loss per device on the validation part.

    With ``use_device_labels`` each device is served by its specialist when
    one exists; without it every sample goes to the base student.
    """
    if isinstance(bundle, MLP):
        bundle = ModelBundle(bundle)
    part = split.validation
    if len(part) == 0:
        raise ValueError("validation part is empty")
    per_device = {}
    warnings = []
    for info in split.devices:
        d = info.device_id
        cell = part.for_device(d)
        if len(cell) == 0:
            msg = f"no validation samples for device {d}; omitted"
            log.warning(msg)
            warnings.append(msg)
            continue
        specialist = use_device_labels and d in bundle.specialists
        model = bundle.specialists[d] if specialist else bundle.base_student
        with no_grad():
            probs = softmax_with_temperature(model(cell.features).logits, 1.0).data
        p_true = probs[np.arange(len(cell)), cell.labels]
        per_device[d] = DeviceMetrics(
            accuracy=float(np.mean(probs.argmax(axis=1) == cell.labels) * 100.0),
            log_loss=float(np.mean(-np.log(np.maximum(p_true, PROB_FLOOR)))),
            count=len(cell),
            routed_to="specialist" if specialist else "base",
        )
    flags = {info.device_id: info for info in split.devices}
    members = {
        "overall": list(per_device),
        "real": [d for d in per_device if flags[d].real],
        "seen": [d for d in per_device if flags[d].seen],
        "unseen": [d for d in per_device if not flags[d].seen],
    }
    aggregates = {}
    for group in GROUPS:
        agg = _weighted([per_device[d] for d in members[group]])
        if agg is not None:
            aggregates[group] = agg
    return EvalReport(per_device, aggregates, split.device_ids, part_hash(part), stage, model_id,
                      warnings=warnings)


def delta(before: EvalReport, after: EvalReport) -> DeltaReport:
    """``after - before`` per device and per aggregate group."""
    if before.split_hash != after.split_hash:
        raise ValueError("reports were computed on different validation data")
    per_device, log_loss = {}, {}
    for d in before.roster:
        if d not in before.per_device or d not in after.per_device:
            continue
        b, a = before.per_device[d], after.per_device[d]
        if b.routed_to == "base" and a.routed_to == "base":
            per_device[d] = None
        else:
            per_device[d] = a.accuracy - b.accuracy
        log_loss[d] = a.log_loss - b.log_loss
    aggregates = {
        g: after.aggregates[g].accuracy - before.aggregates[g].accuracy
        for g in GROUPS
        if g in before.aggregates and g in after.aggregates
    }
    return DeltaReport(before, after, per_device, log_loss, aggregates)


# -- rendering -----------------------------------------------------------------


def _row(label: str, cells: list[str], width: int) -> str:
    return f"{label:<22}|" + "".join(f"{c:>{width}}" for c in cells)


def _device_table(reports: list[EvalReport], extra: list[tuple[str, list[str]]] = ()) -> list[str]:
    roster = reports[0].roster
    w = max(8, max(len(d) for d in roster) + 2)
    lines = [_row("Stage", [*roster, "Overall"], w)]
    lines.append("-" * len(lines[0]))
    for r in reports:
        cells = [f"{r.per_device[d].accuracy:.2f}" if d in r.per_device else "n/a" for d in roster]
        cells.append(f"{r.aggregates['overall'].accuracy:.2f}")
        lines.append(_row(r.stage or "accuracy (%)", cells, w))
    for label, cells in extra:
        lines.append(_row(label, cells, w))
    return lines


def _group_table(reports: list[EvalReport]) -> list[str]:
    groups = [g for g in GROUPS if g in reports[0].aggregates]
    w = 16
    lines = [_row("Stage", [g.capitalize() for g in groups], w)]
    lines.append("-" * len(lines[0]))
    for r in reports:
        cells = [f"{r.aggregates[g].accuracy:.2f} / {r.aggregates[g].log_loss:.3f}" if g in r.aggregates else "n/a"
                 for g in groups]
        lines.append(_row(r.stage or "acc / log loss", cells, w))
    return lines


def render_table(doc: EvalReport | DeltaReport) -> str:
    if isinstance(doc, DeltaReport):
        roster = doc.before.roster
        cells = []
        for d in roster:
            v = doc.per_device.get(d, "n/a")
            cells.append("-" if v is None else v if isinstance(v, str) else f"{v:+.2f}")
        cells.append(f"{doc.aggregates['overall']:+.2f}")
        lines = ["Accuracy (%) by device"]
        lines += _device_table([doc.before, doc.after], [("Improvement (delta)", cells)])
        lines += ["", "Aggregates: accuracy (%) / log loss"]
        lines += _group_table([doc.before, doc.after])
    else:
        lines = ["Accuracy (%) by device"] + _device_table([doc])
        lines += ["", "Aggregates: accuracy (%) / log loss"] + _group_table([doc])
    return "\n".join(lines) + "\n"


def render_structured(doc: EvalReport | DeltaReport) -> str:
    return json.dumps(doc.to_dict(), indent=2, sort_keys=True) + "\n"


def render(doc: EvalReport | DeltaReport, fmt: str = "table") -> str:
    if fmt == "table":
        return render_table(doc)
    if fmt == "structured":
        return render_structured(doc)
    raise ValueError(f"unknown format {fmt!r}")


def parse_structured(text: str) -> EvalReport | DeltaReport:
    doc = json.loads(text)
    kind = doc.get("kind")
    if kind == "eval":
        return EvalReport.from_dict(doc)
    if kind == "delta":
        return DeltaReport.from_dict(doc)
    raise ValueError(f"unknown report kind {kind!r}")
