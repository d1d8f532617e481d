"""Synthetic device-shifted scene data, dataset files and batching.

Each scene class has a latent F x T prototype. A recording device acts as a
per-frequency channel: ``x[f, t] = gain[f] * z[f, t] + offset[f] + noise``.
Seen devices populate the training part; every device appears in
validation so unseen-device generalization can be measured.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"DAFA"
VERSION = 1
_HEADER = struct.Struct("<4sH6I")  # magic, version, n, F, T, c, n_devices, n_train

DEFAULT_SEEN = ("A", "B", "C", "S1", "S2", "S3")
DEFAULT_UNSEEN = ("S4", "S5", "S6")
DEFAULT_REAL = ("A", "B", "C")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class SceneSpec:
    num_classes: int = 10
    freq_bins: int = 16
    time_frames: int = 8
    prototype_scale: float = 0.04
    within_class_noise: float = 0.04
    modes_per_class: int = 4

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two scene classes")
        if self.modes_per_class < 1:
            raise ValueError("modes_per_class must be >= 1")
        if self.freq_bins < 1 or self.time_frames < 1:
            raise ValueError("feature grid must be at least 1 x 1")

    @property
    def feature_dim(self) -> int:
        return self.freq_bins * self.time_frames


@dataclass(frozen=True)
class DeviceSpec:
    device_id: str
    gain: tuple[float, ...]
    offset: tuple[float, ...]
    noise_std: float = 0.05
    seen: bool = True
    real: bool = False

    def __post_init__(self):
        if len(self.gain) != len(self.offset):
            raise ValueError(f"device {self.device_id}: gain and offset lengths differ")
        if any(g <= 0 for g in self.gain):
            raise ValueError(f"device {self.device_id}: gains must be positive")
        if self.noise_std < 0:
            raise ValueError(f"device {self.device_id}: noise_std must be nonnegative")


@dataclass
class LabeledBatch:
    features: np.ndarray  # (n, F*T)
    targets: np.ndarray  # (n, c), row-stochastic
    device_ids: list

    def __post_init__(self):
        n = self.features.shape[0]
        if self.targets.shape[0] != n or len(self.device_ids) != n:
            raise ValueError(
                f"row counts disagree: features {n}, targets {self.targets.shape[0]}, devices {len(self.device_ids)}"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return self.targets.argmax(axis=1)


@dataclass
class DevicePart:
    """One part (train or validation) of a dataset, stored as hard labels."""

    features: np.ndarray
    labels: np.ndarray
    device_ids: list

    def __len__(self) -> int:
        return self.features.shape[0]

    def to_batch(self, num_classes: int, index=None) -> LabeledBatch:
        idx = np.arange(len(self)) if index is None else np.asarray(index, dtype=np.intp)
        targets = np.zeros((idx.size, num_classes))
        targets[np.arange(idx.size), self.labels[idx]] = 1.0
        return LabeledBatch(self.features[idx], targets, [self.device_ids[i] for i in idx])

    def subset(self, mask) -> DevicePart:
        idx = np.flatnonzero(mask)
        return DevicePart(self.features[idx], self.labels[idx], [self.device_ids[i] for i in idx])

    def for_device(self, device_id: str) -> DevicePart:
        return self.subset(np.array([d == device_id for d in self.device_ids], dtype=bool))


@dataclass(frozen=True)
class DeviceInfo:
    device_id: str
    seen: bool
    real: bool = False


@dataclass
class DatasetSplit:
    num_classes: int
    freq_bins: int
    time_frames: int
    devices: list  # DeviceInfo, roster order
    train: DevicePart
    validation: DevicePart

    def __post_init__(self):
        unseen = {d.device_id for d in self.devices if not d.seen}
        leaked = unseen.intersection(self.train.device_ids)
        if leaked:
            raise ValueError(f"unseen devices in training data: {sorted(leaked)}")

    @property
    def seen_devices(self) -> list[str]:
        return [d.device_id for d in self.devices if d.seen]

    @property
    def unseen_devices(self) -> list[str]:
        return [d.device_id for d in self.devices if not d.seen]

    @property
    def device_ids(self) -> list[str]:
        return [d.device_id for d in self.devices]


def default_devices(
    freq_bins: int = 16,
    seed: int = 0,
    offset_scale: float = 0.2,
    gain_tilt: float = 2.0,
    gain_ripple: float = 1.0,
    noise_range: tuple[float, float] = (0.04, 0.2),
) -> list[DeviceSpec]:
    """Six seen and three unseen synthetic channels, named after the challenge roster.

    Gains are smooth random frequency responses (log-linear tilt plus a
    sinusoidal ripple); offsets shift the level of each band. Drawn from
    ``seed`` so the roster is reproducible.
    """
    rng = np.random.default_rng([seed, 0xDE1])
    f = np.linspace(0.0, 1.0, freq_bins)
    devices = []
    for name in DEFAULT_SEEN + DEFAULT_UNSEEN:
        tilt = rng.uniform(-gain_tilt, gain_tilt)
        ripple = rng.uniform(0.0, gain_ripple)
        phase = rng.uniform(0.0, 2 * np.pi)
        log_gain = tilt * (f - 0.5) + ripple * np.sin(2 * np.pi * f * rng.uniform(1.0, 3.0) + phase)
        offset = rng.uniform(-offset_scale, offset_scale) + rng.normal(0.0, offset_scale / 2, freq_bins)
        devices.append(
            DeviceSpec(
                device_id=name,
                gain=tuple(np.exp(log_gain).tolist()),
                offset=tuple(offset.tolist()),
                noise_std=float(rng.uniform(*noise_range)),
                seen=name not in DEFAULT_UNSEEN,
                real=name in DEFAULT_REAL,
            )
        )
    return devices


def _to_f32_precision(x: np.ndarray) -> np.ndarray:
    # stored on disk as f32; rounding here makes write/read bit-exact
    return x.astype(np.float32).astype(np.float64)


def generate(
    scene: SceneSpec,
    devices: Sequence[DeviceSpec],
    train_per_cell: int = 40,
    validation_per_cell: int = 20,
    seed: int = 0,
    require_unseen: bool = True,
) -> DatasetSplit:
    """Draw a balanced dataset: every (class, device) cell gets the same counts.

    Only seen devices contribute training samples; validation covers all.
    """
    ids = [d.device_id for d in devices]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate device ids in roster: {ids}")
    seen = [d for d in devices if d.seen]
    if len(seen) < 2:
        raise ValueError("need at least two seen devices")
    if require_unseen and len(seen) == len(devices):
        raise ValueError("need at least one unseen device")
    for d in devices:
        if len(d.gain) != scene.freq_bins:
            raise ValueError(f"device {d.device_id} has {len(d.gain)} bands, scene has {scene.freq_bins}")

    rng = np.random.default_rng(seed)
    F, T = scene.freq_bins, scene.time_frames
    prototypes = rng.normal(0.0, scene.prototype_scale, size=(scene.num_classes, scene.modes_per_class, F, T))

    def draw(device: DeviceSpec, count: int):
        feats, labels = [], []
        gain = np.asarray(device.gain)[:, None]
        offset = np.asarray(device.offset)[:, None]
        for k in range(scene.num_classes):
            mode = rng.integers(0, scene.modes_per_class, size=count)
            z = prototypes[k, mode] + rng.normal(0.0, scene.within_class_noise, size=(count, F, T))
            x = gain * z + offset + rng.normal(0.0, device.noise_std, size=(count, F, T))
            feats.append(x.reshape(count, F * T))
            labels.append(np.full(count, k))
        return feats, labels

    def assemble(roster, count):
        feats, labels, dev = [], [], []
        for d in roster:
            f, lab = draw(d, count)
            feats.extend(f)
            labels.extend(lab)
            dev.extend([d.device_id] * (count * scene.num_classes))
        if not feats:
            return DevicePart(np.zeros((0, F * T)), np.zeros(0, dtype=np.int64), [])
        return DevicePart(
            _to_f32_precision(np.concatenate(feats)), np.concatenate(labels).astype(np.int64), dev
        )

    train = assemble(seen, train_per_cell)
    validation = assemble(devices, validation_per_cell)
    return DatasetSplit(
        scene.num_classes,
        F,
        T,
        [DeviceInfo(d.device_id, d.seen, d.real) for d in devices],
        train,
        validation,
    )


# -- file format ---------------------------------------------------------------


def encode_dataset(split: DatasetSplit) -> bytes:
    ndev = len(split.devices)
    n_train, n_val = len(split.train), len(split.validation)
    out = bytearray(
        _HEADER.pack(MAGIC, VERSION, n_train + n_val, split.freq_bins, split.time_frames,
                     split.num_classes, ndev, n_train)
    )
    index = {}
    for i, d in enumerate(split.devices):
        name = d.device_id.encode("utf-8")
        out += struct.pack("<H", len(name)) + name + struct.pack("<B", int(d.seen) | (int(d.real) << 1))
        index[d.device_id] = i
    dim = split.freq_bins * split.time_frames
    recs = np.zeros(n_train + n_val, dtype=_record_dtype(dim))
    for lo, part in ((0, split.train), (n_train, split.validation)):
        hi = lo + len(part)
        recs["dev"][lo:hi] = [index[d] for d in part.device_ids]
        recs["cls"][lo:hi] = part.labels
        recs["x"][lo:hi] = part.features.reshape(len(part), dim)
    out += recs.tobytes()
    return bytes(out)


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("dev", "<u2"), ("cls", "<u2"), ("x", "<f4", (dim,))])


def decode_dataset(buf: bytes) -> DatasetSplit:
    if len(buf) < _HEADER.size:
        raise DatasetFormatError("truncated header", len(buf))
    magic, version, n, F, T, c, ndev, n_train = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    if n_train > n:
        raise DatasetFormatError(f"train count {n_train} exceeds record count {n}", _HEADER.size - 4)
    pos = _HEADER.size
    devices = []
    for _ in range(ndev):
        if pos + 2 > len(buf):
            raise DatasetFormatError("truncated device table", pos)
        (length,) = struct.unpack_from("<H", buf, pos)
        if pos + 2 + length + 1 > len(buf):
            raise DatasetFormatError("truncated device table", pos)
        name = buf[pos + 2 : pos + 2 + length].decode("utf-8")
        flags = buf[pos + 2 + length]
        devices.append(DeviceInfo(name, bool(flags & 1), bool(flags & 2)))
        pos += 3 + length
    dim = F * T
    rec_size = 4 + 4 * dim
    expected = pos + n * rec_size
    if len(buf) < expected:
        raise DatasetFormatError(f"truncated records: need {expected} bytes, have {len(buf)}", len(buf))
    if len(buf) > expected:
        raise DatasetFormatError("trailing bytes after last record", expected)
    recs = np.frombuffer(buf, dtype=_record_dtype(dim), count=n, offset=pos)
    bad = np.flatnonzero((recs["dev"] >= ndev) | (recs["cls"] >= c))
    if bad.size:
        raise DatasetFormatError(f"record {bad[0]} has out-of-range device/class index", pos + int(bad[0]) * rec_size)
    feats = recs["x"].astype(np.float64).reshape(n, dim)
    labels = recs["cls"].astype(np.int64)
    dev = [devices[i].device_id for i in recs["dev"]]
    train = DevicePart(feats[:n_train], labels[:n_train], dev[:n_train])
    validation = DevicePart(feats[n_train:], labels[n_train:], dev[n_train:])
    return DatasetSplit(c, F, T, devices, train, validation)


def write_dataset(split: DatasetSplit, path) -> str:
    """Write ``split`` and return the SHA-256 of the file contents."""
    buf = encode_dataset(split)
    Path(path).write_bytes(buf)
    return hashlib.sha256(buf).hexdigest()


def read_dataset(path) -> DatasetSplit:
    return decode_dataset(Path(path).read_bytes())


def part_hash(part: DevicePart) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(part.features, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(part.labels, dtype="<i8").tobytes())
    h.update("\x00".join(part.device_ids).encode("utf-8"))
    return h.hexdigest()


# -- batching ------------------------------------------------------------------


def batch_order(part: DevicePart, seed: int, epoch: int = 0, shuffle: bool = True) -> np.ndarray:
    """Row order for one epoch.

    Shuffled order is device-stratified: each device pool is permuted, then
    pools are interleaved round-robin (device order reshuffled every round),
    so consecutive rows cycle through devices.
    """
    n = len(part)
    if not shuffle:
        return np.arange(n)
    rng = np.random.default_rng([seed, epoch])
    pools: dict[str, list[int]] = {}
    for i, d in enumerate(part.device_ids):
        pools.setdefault(d, []).append(i)
    queues = [list(rng.permutation(idx)) for _, idx in sorted(pools.items())]
    order = []
    depth = max((len(q) for q in queues), default=0)
    for r in range(depth):
        live = [q for q in queues if r < len(q)]
        for j in rng.permutation(len(live)):
            order.append(live[j][r])
    return np.asarray(order, dtype=np.intp)


def batches(
    part: DevicePart,
    num_classes: int,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
) -> Iterator[LabeledBatch]:
    """Partition ``part`` into batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = batch_order(part, seed, epoch, shuffle)
    for start in range(0, order.size, batch_size):
        yield part.to_batch(num_classes, order[start : start + batch_size])

