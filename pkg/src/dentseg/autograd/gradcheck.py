"""Analytic-vs-numeric gradient comparison."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .tensor import Tensor


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)
    checked: int = 0

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _rel_errors(analytic: np.ndarray, numeric: np.ndarray, floor_frac: float) -> float:
    # entries far below the largest gradient are compared against a floor so
    # that finite-difference round-off on near-zero entries does not dominate
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor_frac * scale)
    return float((np.abs(analytic - numeric) / denom).max())


def gradcheck(fn, inputs: list[Tensor], eps: float | None = None, max_checks: int = 64,
              seed: int = 0, floor_frac: float = 0.1, wrt=None) -> GradcheckReport:
    """Compare backprop gradients of ``fn`` with central differences.

    ``fn`` maps the input tensors to one tensor; it is reduced to a scalar by
    a fixed random projection accumulated in float64. At most ``max_checks``
    randomly chosen entries per input are perturbed. ``wrt`` restricts the
    check to the listed input indices (default: all requiring gradients).
    """
    # a stream of its own, so the projection never coincides with inputs drawn from default_rng(seed)
    rng = np.random.default_rng([seed, 0x67726164])
    idx = [i for i, t in enumerate(inputs) if t.requires_grad] if wrt is None else list(wrt)
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape) if out.ndim else np.ones(())

    def scalar() -> float:
        return float(np.sum(fn(*inputs).data.astype(np.float64) * proj))

    for t in inputs:
        t.grad = None
    F.dot(out, proj).backward()
    errors = []
    n_checked = 0
    for i in idx:
        t = inputs[i]
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        h = eps if eps is not None else (1e-2 if t.dtype == np.float32 else 1e-4)
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(max_checks, flat.size), replace=False)
        num = np.empty(len(picks))
        for j, p in enumerate(picks):
            orig = flat[p]
            flat[p] = orig + h
            up = float(flat[p])
            fp = scalar()
            flat[p] = orig - h
            down = float(flat[p])
            fm = scalar()
            flat[p] = orig
            # divide by the step actually taken after rounding to the input dtype
            num[j] = (fp - fm) / (up - down)
        errors.append(_rel_errors(analytic.reshape(-1)[picks], num, floor_frac))
        n_checked += len(picks)
    return GradcheckReport(max(errors) if errors else 0.0, errors, n_checked)
