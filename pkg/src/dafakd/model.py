"""Fully connected classifiers with an exposed embedding, plus complexity accounting.

Layer stack: ``input -> hidden... -> embedding -> classes``. Every layer but
the head is followed by ReLU; the embedding is the head's input.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, matmul

CKPT_MAGIC = b"DAFM"
CKPT_VERSION = 1
ACTIVATIONS = ("relu",)


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    embedding_dim: int = 32
    num_classes: int = 10
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.embedding_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer widths must be >= 1, got {dims}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        widths = [self.input_dim, *self.hidden_dims, self.embedding_dim, self.num_classes]
        return list(zip(widths[:-1], widths[1:]))


@dataclass(frozen=True)
class ComplexityBudget:
    max_param_bytes: int = 128 * 1024
    bytes_per_param: int = 4
    max_macs: int = 30_000_000

    def __post_init__(self):
        if min(self.max_param_bytes, self.bytes_per_param, self.max_macs) <= 0:
            raise ValueError("budget limits must be positive")


@dataclass
class BudgetReport:
    params: int
    param_bytes: int
    macs: int
    budget: ComplexityBudget
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    @property
    def param_margin_bytes(self) -> int:
        return self.budget.max_param_bytes - self.param_bytes

    @property
    def mac_margin(self) -> int:
        return self.budget.max_macs - self.macs

    def lines(self) -> list[str]:
        b = self.budget
        return [
            f"parameters: {self.params} x {b.bytes_per_param} B = {self.param_bytes} B "
            f"(limit {b.max_param_bytes} B, margin {self.param_margin_bytes} B)",
            f"MACs: {self.macs} (limit {b.max_macs}, margin {self.mac_margin})",
            "PASS" if self.passed else "FAIL: " + "; ".join(self.violations),
        ]

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "param_bytes": self.param_bytes,
            "macs": self.macs,
            "max_param_bytes": self.budget.max_param_bytes,
            "bytes_per_param": self.budget.bytes_per_param,
            "max_macs": self.budget.max_macs,
            "passed": self.passed,
            "violations": list(self.violations),
        }


def dense_layer_cost(fan_in: int, fan_out: int) -> tuple[int, int]:
    """(parameters, MACs per input item) of one dense layer with bias."""
    return fan_in * fan_out + fan_out, fan_in * fan_out


def count_complexity(spec: NetworkSpec) -> tuple[int, int]:
    params = macs = 0
    for fan_in, fan_out in spec.layer_dims:
        p, m = dense_layer_cost(fan_in, fan_out)
        params += p
        macs += m
    return params, macs


def enforce_budget(spec: NetworkSpec, budget: ComplexityBudget) -> BudgetReport:
    params, macs = count_complexity(spec)
    param_bytes = params * budget.bytes_per_param
    violations = []
    if param_bytes > budget.max_param_bytes:
        violations.append(f"parameter memory {param_bytes} B exceeds {budget.max_param_bytes} B")
    if macs > budget.max_macs:
        violations.append(f"MACs {macs} exceed {budget.max_macs}")
    return BudgetReport(params, param_bytes, macs, budget, violations)


@dataclass
class ForwardResult:
    embedding: Tensor
    logits: Tensor


class MLP:
    def __init__(self, spec: NetworkSpec, weights: list[Tensor], biases: list[Tensor]):
        self.spec = spec
        self.weights = weights
        self.biases = biases

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, features) -> ForwardResult:
        h = as_tensor(features)
        if h.ndim != 2 or h.shape[1] != self.spec.input_dim:
            raise DimensionError(f"expected (n, {self.spec.input_dim}) features, got {h.shape}")
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = (matmul(h, w) + b).relu()
        logits = matmul(h, self.weights[-1]) + self.biases[-1]
        return ForwardResult(h, logits)

    __call__ = forward

    def clone(self) -> MLP:
        return MLP(
            self.spec,
            [Tensor(w.data.copy(), requires_grad=True) for w in self.weights],
            [Tensor(b.data.copy(), requires_grad=True) for b in self.biases],
        )

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.parameters()])

    def checksum(self) -> str:
        return hashlib.sha256(self.flat_parameters().astype("<f8").tobytes()).hexdigest()


def init_parameters(spec: NetworkSpec, rng: np.random.Generator) -> MLP:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_dims:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True))
        biases.append(Tensor(np.zeros((1, fan_out)), requires_grad=True))
    return MLP(spec, weights, biases)


# -- checkpoints -------------------------------------------------------------
# header: magic, version u16, then u32 input_dim, n_hidden, hidden..., embedding_dim,
# num_classes, activation code; body: float64 LE weights then bias, layer by layer.


def encode_checkpoint(model: MLP) -> bytes:
    s = model.spec
    ints = [s.input_dim, len(s.hidden_dims), *s.hidden_dims, s.embedding_dim, s.num_classes,
            ACTIVATIONS.index(s.activation)]
    head = CKPT_MAGIC + struct.pack("<H", CKPT_VERSION) + struct.pack(f"<{len(ints)}I", *ints)
    return head + model.flat_parameters().astype("<f8").tobytes()


def decode_checkpoint(buf: bytes) -> MLP:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic {buf[:4]!r} at byte 0")
    if len(buf) < 14:
        raise CheckpointFormatError(f"truncated checkpoint header at byte {len(buf)}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} at byte 4")
    input_dim, n_hidden = struct.unpack_from("<2I", buf, 6)
    pos = 14
    need = pos + 4 * (n_hidden + 3)
    if len(buf) < need:
        raise CheckpointFormatError(f"truncated checkpoint header at byte {len(buf)}")
    rest = struct.unpack_from(f"<{n_hidden + 3}I", buf, pos)
    pos = need
    hidden, (embedding_dim, num_classes, act) = rest[:n_hidden], rest[n_hidden:]
    if act >= len(ACTIVATIONS):
        raise CheckpointFormatError(f"unknown activation code {act} at byte {pos - 4}")
    spec = NetworkSpec(input_dim, tuple(hidden), embedding_dim, num_classes, ACTIVATIONS[act])
    n_params = count_complexity(spec)[0]
    if len(buf) != pos + 8 * n_params:
        raise CheckpointFormatError(
            f"expected {n_params} parameters after byte {pos}, file has {(len(buf) - pos) / 8:g}"
        )
    flat = np.frombuffer(buf, dtype="<f8", offset=pos).astype(np.float64)
    weights, biases = [], []
    i = 0
    for fan_in, fan_out in spec.layer_dims:
        weights.append(Tensor(flat[i : i + fan_in * fan_out].reshape(fan_in, fan_out), requires_grad=True))
        i += fan_in * fan_out
        biases.append(Tensor(flat[i : i + fan_out].reshape(1, fan_out), requires_grad=True))
        i += fan_out
    return MLP(spec, weights, biases)


def save_checkpoint(model: MLP, path) -> str:
    buf = encode_checkpoint(model)
    Path(path).write_bytes(buf)
    return hashlib.sha256(buf).hexdigest()


def load_checkpoint(path) -> MLP:
    return decode_checkpoint(Path(path).read_bytes())
