"""Batch-level Mixup and Freq-MixStyle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledBatch

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.3
    apply_probability: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"mixup alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply_probability must lie in [0, 1]")


@dataclass(frozen=True)
class FreqMixStyleConfig:
    alpha: float = 0.3
    apply_probability: float = 0.4

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"freq-mixstyle alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply_probability must lie in [0, 1]")


def mixup(
    batch: LabeledBatch,
    cfg: MixupConfig,
    rng: np.random.Generator,
    lam: float | None = None,
    perm: np.ndarray | None = None,
) -> LabeledBatch:
    """Convex combination of the batch with a permuted copy of itself.

    Features and soft targets share one coefficient; each row keeps the
    device id of its first operand. ``lam``/``perm`` override the random
    draws.
    """
    if len(batch) == 0:
        raise ValueError("mixup needs a nonempty batch")
    if rng.random() >= cfg.apply_probability:
        return batch
    if lam is None:
        lam = float(rng.beta(cfg.alpha, cfg.alpha))
    if perm is None:
        perm = rng.permutation(len(batch))
    x = lam * batch.features + (1.0 - lam) * batch.features[perm]
    y = lam * batch.targets + (1.0 - lam) * batch.targets[perm]
    return LabeledBatch(x, y, list(batch.device_ids))


def freq_mixstyle(
    batch: LabeledBatch,
    cfg: FreqMixStyleConfig,
    rng: np.random.Generator,
    freq_bins: int,
    lam=None,
    perm: np.ndarray | None = None,
) -> LabeledBatch:
    """Mix per-frequency-bin statistics between samples.

    Features are viewed as (n, F, T). Each bin is normalised by its own
    time-axis mean/std, then rescaled with a per-sample convex mix of its own
    and a partner's statistics. Labels and device ids are untouched.
    ``lam`` may be a scalar or one coefficient per sample.
    """
    n, dim = batch.features.shape
    if freq_bins < 1 or dim % freq_bins:
        raise ValueError(f"cannot view {dim} features as {freq_bins} frequency bins")
    if rng.random() >= cfg.apply_probability:
        return batch
    x = batch.features.reshape(n, freq_bins, dim // freq_bins)
    mu = x.mean(axis=2, keepdims=True)
    sigma = x.std(axis=2, keepdims=True)
    if lam is None:
        lam = rng.beta(cfg.alpha, cfg.alpha, size=n)
    if perm is None:
        perm = rng.permutation(n)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,))[:, None, None]
    if np.all(lam == 1.0):
        return batch
    mix_mu = lam * mu + (1.0 - lam) * mu[perm]
    mix_sigma = lam * sigma + (1.0 - lam) * sigma[perm]
    normed = (x - mu) / np.maximum(sigma, STD_FLOOR)
    out = normed * mix_sigma + mix_mu
    return LabeledBatch(out.reshape(n, dim), batch.targets, list(batch.device_ids))
