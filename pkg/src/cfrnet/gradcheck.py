"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    per_input: list = field(default_factory=list)
    tol: float = 1e-4
    message: str = ""

    @property
    def passed(self) -> bool:
        return np.isfinite(self.max_rel_error) and self.max_rel_error < self.tol and not self.message


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor).

    The floor keeps components whose true gradient is essentially zero from
    reporting round-off as a large relative error.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def finite_diff_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-6,
                      tol: float = 1e-4, name: str = "op", seed: int = 0,
                      wrt: Sequence[int] | None = None) -> GradCheckReport:
    """Compare backprop gradients of ``fn(*inputs)`` with central differences.

    The output is contracted with a fixed random tensor so that every output
    element contributes. ``inputs`` should be float64 with ``requires_grad``
    set on those to check.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"step h must lie in [1e-6, 1e-3], got {h}")
    rng = np.random.default_rng(seed)
    idx = [i for i, t in enumerate(inputs) if t.requires_grad] if wrt is None else list(wrt)
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape)

    def scalar() -> float:
        return float(np.sum(fn(*inputs).data.astype(np.float64) * proj))

    out.backward(proj.astype(out.dtype))
    per_input = []
    worst = 0.0
    message = ""
    for i in idx:
        t = inputs[i]
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        if not np.all(np.isfinite(analytic)):
            message = f"{name}: non-finite analytic gradient for input {i}"
            worst = float("inf")
            per_input.append(float("inf"))
            continue
        numeric = np.zeros(t.shape)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = scalar()
            flat[k] = orig - h
            fm = scalar()
            flat[k] = orig
            nflat[k] = (fp - fm) / (2 * h)
        err = relative_error(analytic, numeric)
        per_input.append(err)
        worst = max(worst, err)
    return GradCheckReport(name=name, max_rel_error=worst, per_input=per_input, tol=tol, message=message)
