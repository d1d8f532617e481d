"""Central finite-difference checks for anything built on :class:`Tensor`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    expect_failure: bool = False  # mutation canaries pass when the checker catches them

    @property
    def within_tolerance(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)

    @property
    def passed(self) -> bool:
        return self.within_tolerance != self.expect_failure

    @property
    def detail(self) -> str:
        text = f"max rel err {self.max_rel_error:.2e} (tol {self.tolerance:.0e})"
        return text + (", bug detected" if self.expect_failure and self.passed else "")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``, falling back to absolute error near zero."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    diff = float(np.max(np.abs(analytic - numeric), initial=0.0))
    return diff / scale if scale > 1e-12 else diff


def numeric_grad(fn: Callable[[], Tensor], x: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. the array ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_gradients(
    name: str,
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> GradCheckResult:
    """Compare analytic and numeric gradients of ``fn()`` for every tensor in ``inputs``.

    ``fn`` must rebuild its graph from the current contents of ``inputs`` on
    each call.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for t, a in zip(inputs, analytic):
        n = numeric_grad(fn, t.data, h)
        worst = max(worst, relative_error(a, n))
    return GradCheckResult(name, worst, tolerance)


def _sign_flipped(t: Tensor) -> Tensor:
    """Identity forward, negated backward: a deliberately broken op."""
    return Tensor._from_op(t.data.copy(), (t,), lambda g: (-g,), "sign_flip")


def standard_suite(seed: int = 0, tolerance: float = DEFAULT_TOLERANCE) -> list[GradCheckResult]:
    """Every loss and layer on small random batches, plus one mutation canary."""
    from .losses import DAFAConfig, KDConfig, cross_entropy, dafa_teacher_loss, dcsl, gdal, kd_loss
    from .model import NetworkSpec, init_parameters

    rng = np.random.default_rng(seed)
    n, c, e = 8, 5, 4
    devices = ["A", "A", "B", "B", "B", "C", "C", "A"]
    y = np.eye(c)[rng.integers(0, c, n)]
    z = Tensor(rng.normal(size=(n, c)), requires_grad=True)
    zt = rng.normal(size=(n, c)) * 2.0
    emb = Tensor(rng.normal(size=(n, e)), requires_grad=True)
    out = [check_gradients("cross_entropy", lambda: cross_entropy(z, y), [z], tolerance=tolerance)]
    for tau in (1.0, 2.0, 4.0):
        for lam in (0.0, 0.5, 0.98, 1.0):
            cfg = KDConfig(lam, tau)
            out.append(check_gradients(f"kd_loss tau={tau:g} lam={lam:g}", lambda cfg=cfg: kd_loss(z, zt, y, cfg),
                                       [z], tolerance=tolerance))
    out.append(check_gradients("dcsl", lambda: dcsl(emb, devices), [emb], tolerance=tolerance))
    out.append(check_gradients("gdal", lambda: gdal(emb, devices), [emb], tolerance=tolerance))
    dafa = DAFAConfig(0.5, 0.5)
    out.append(check_gradients("dafa_teacher_loss", lambda: dafa_teacher_loss(z, emb, y, devices, dafa),
                               [z, emb], tolerance=tolerance))
    spec = NetworkSpec(6, (5,), e, c)
    model = init_parameters(spec, rng)
    for b in model.biases:
        b.data[...] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(n, 6))
    out.append(check_gradients("mlp layers (ce + dafa)",
                               lambda: dafa_teacher_loss(model(x).logits, model(x).embedding, y, devices, dafa),
                               model.parameters(), tolerance=tolerance))
    canary = check_gradients("mutation canary: sign-flipped dcsl", lambda: dcsl(_sign_flipped(emb), devices),
                             [emb], tolerance=tolerance)
    canary.expect_failure = True
    out.append(canary)
    return out
