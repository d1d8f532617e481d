"""Classification, distillation and device-alignment losses.

Everything returns a scalar :class:`~dafakd.tensor.Tensor` so terms can be
summed and differentiated together. Embedding-space losses take the
penultimate activations of a model plus one device id per row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, log_softmax, matmul


class LossInputError(ValueError):
    """Loss inputs violate a precondition (empty batch, non-stochastic targets)."""


@dataclass(frozen=True)
class KDConfig:
    lam: float = 0.98
    tau: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"KD weight must lie in [0, 1], got {self.lam}")
        if self.tau <= 0:
            raise ValueError(f"KD temperature must be positive, got {self.tau}")


@dataclass(frozen=True)
class DAFAConfig:
    lambda_dcsl: float = 0.01
    lambda_gdal: float = 0.01
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.lambda_dcsl < 0 or self.lambda_gdal < 0:
            raise ValueError("DAFA weights must be nonnegative")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class DeviceBatchStats:
    devices: list
    centroids: dict  # device id -> (e,) array
    global_centroid: np.ndarray
    counts: dict  # device id -> int


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-sum(target * log_softmax(logits))``; targets may be soft."""
    logits = as_tensor(logits)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"targets {y.shape} do not match logits {logits.shape}")
    if not np.allclose(y.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
        raise LossInputError("target rows must sum to 1")
    return -(log_softmax(logits) * y).sum(axis=1).mean()


def kl_divergence(student_logits: Tensor, teacher_logits, tau: float = 1.0) -> Tensor:
    """Batch-mean ``KL(softmax(z_s/tau) || softmax(z_t/tau))``; the teacher side is constant."""
    t = teacher_logits.detach() if isinstance(teacher_logits, Tensor) else Tensor(teacher_logits)
    log_p = log_softmax(student_logits, tau)
    log_q = log_softmax(t, tau).data
    return (log_p.exp() * (log_p - log_q)).sum(axis=1).mean()


def kd_loss(student_logits: Tensor, teacher_logits, targets, cfg: KDConfig) -> Tensor:
    """``(1-lam) * CE(z_s, y) + lam * tau^2 * KL(z_s/tau || z_t/tau)``.

    Teacher logits are treated as constants even if they carry a graph.
    """
    student_logits = as_tensor(student_logits)
    t_shape = teacher_logits.shape
    if student_logits.shape != tuple(t_shape):
        raise DimensionError(f"student logits {student_logits.shape} vs teacher logits {tuple(t_shape)}")
    hard = cross_entropy(student_logits, targets)
    soft = kl_divergence(student_logits, teacher_logits, cfg.tau)
    return hard * (1.0 - cfg.lam) + soft * (cfg.lam * cfg.tau**2)


def _device_index(device_ids: Sequence[Hashable], n: int) -> tuple[list, np.ndarray]:
    if n == 0:
        raise LossInputError("empty batch")
    if len(device_ids) != n:
        raise DimensionError(f"{len(device_ids)} device ids for {n} embeddings")
    devices = sorted(set(device_ids), key=str)
    lookup = {d: i for i, d in enumerate(devices)}
    return devices, np.array([lookup[d] for d in device_ids], dtype=np.intp)


def _membership(codes: np.ndarray, num_devices: int) -> tuple[np.ndarray, np.ndarray]:
    onehot = np.zeros((codes.size, num_devices))
    onehot[np.arange(codes.size), codes] = 1.0
    counts = onehot.sum(axis=0)
    return onehot, counts


def _centroids(x: Tensor, onehot: np.ndarray, counts: np.ndarray) -> Tensor:
    return matmul(Tensor(onehot.T / counts[:, None]), x)


def device_batch_stats(embeddings, device_ids: Sequence[Hashable]) -> DeviceBatchStats:
    """Exact per-device and global centroids (no gradient).

    Sums are correctly rounded via :func:`math.fsum`, so the result does not
    depend on the order of rows in the batch.
    """
    x = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"embeddings must be 2-D, got shape {x.shape}")
    devices, codes = _device_index(device_ids, x.shape[0])

    def fmean(rows: np.ndarray) -> np.ndarray:
        return np.array([math.fsum(col) / rows.shape[0] for col in rows.T])

    centroids = {}
    counts = {}
    for i, d in enumerate(devices):
        rows = x[codes == i]
        centroids[d] = fmean(rows)
        counts[d] = int(rows.shape[0])
    return DeviceBatchStats(devices, centroids, fmean(x), counts)


def scatter_terms(embeddings: Tensor, device_ids: Sequence[Hashable]) -> tuple[Tensor, Tensor] | None:
    """Intra-device scatter S_W and inter-device scatter S_B, or None with one device.

    S_W is the mean squared distance of each row to its device centroid;
    S_B the mean squared distance over unordered pairs of distinct centroids.
    """
    x = as_tensor(embeddings)
    devices, codes = _device_index(device_ids, x.shape[0])
    k = len(devices)
    if k < 2:
        return None
    onehot, counts = _membership(codes, k)
    mu = _centroids(x, onehot, counts)
    resid = x - matmul(Tensor(onehot), mu)
    s_w = (resid * resid).sum() * (1.0 / x.shape[0])
    rows, cols = np.triu_indices(k, 1)
    pairs = np.zeros((rows.size, k))
    pairs[np.arange(rows.size), rows] = 1.0
    pairs[np.arange(rows.size), cols] = -1.0
    gaps = matmul(Tensor(pairs), mu)
    s_b = (gaps * gaps).sum() * (1.0 / rows.size)
    return s_w, s_b


def dcsl(embeddings: Tensor, device_ids: Sequence[Hashable], epsilon: float = 1e-8) -> Tensor:
    """Device cohesion-separation ratio ``S_W / (S_B + epsilon)``.

    A batch holding a single device contributes an exact zero with zero
    gradient, since S_B is undefined there.
    """
    x = as_tensor(embeddings)
    terms = scatter_terms(x, device_ids)
    if terms is None:
        return x.sum() * 0.0
    s_w, s_b = terms
    return s_w / (s_b + epsilon)


def gdal(embeddings: Tensor, device_ids: Sequence[Hashable]) -> Tensor:
    """Mean over devices of the squared distance from device centroid to batch centroid.

    With one device the two centroids coincide, so the result is an exact zero.
    """
    x = as_tensor(embeddings)
    devices, codes = _device_index(device_ids, x.shape[0])
    if len(devices) < 2:
        return x.sum() * 0.0
    onehot, counts = _membership(codes, len(devices))
    mu = _centroids(x, onehot, counts)
    diff = mu - x.mean(axis=0, keepdims=True)
    return (diff * diff).sum() * (1.0 / len(devices))


def dafa_teacher_loss(
    logits: Tensor,
    embeddings: Tensor,
    targets,
    device_ids: Sequence[Hashable],
    cfg: DAFAConfig,
) -> Tensor:
    """Cross-entropy plus weighted DCSL and GDAL on the embeddings.

    Zero-weighted terms are skipped, so ``DAFAConfig(0, 0)`` reduces to
    plain cross-entropy bit for bit.
    """
    n = logits.shape[0]
    if embeddings.shape[0] != n or len(device_ids) != n:
        raise DimensionError(
            f"batch sizes disagree: logits {n}, embeddings {embeddings.shape[0]}, devices {len(device_ids)}"
        )
    loss = cross_entropy(logits, targets)
    if cfg.lambda_dcsl:
        loss = loss + dcsl(embeddings, device_ids, cfg.epsilon) * cfg.lambda_dcsl
    if cfg.lambda_gdal:
        loss = loss + gdal(embeddings, device_ids) * cfg.lambda_gdal
    return loss
