"""Central-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, shadow64


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    n_checked: int
    message: str = ""

    def __bool__(self) -> bool:
        return self.passed


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x,
    rel_tol: float | None = None,
    step: float = 1e-3,
    shadow: bool = True,
    indices: Sequence[int] | None = None,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    The error is ``max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf)``,
    i.e. relative to the scale of the gradient being checked. ``indices``
    restricts the check to a subset of flat positions (useful for large
    parameter tensors). Defaults: ``rel_tol`` 1e-4 with the 64-bit shadow,
    1e-2 without.
    """
    if rel_tol is None:
        rel_tol = 1e-4 if shadow else 1e-2
    base = np.asarray(x.data if isinstance(x, Tensor) else x)
    dtype = np.float64 if shadow else np.float32

    def run():
        x0 = base.astype(dtype)
        t = Tensor(x0.copy(), requires_grad=True, dtype=dtype)
        out = f(t)
        if out.size != 1:
            return None, "f must return a scalar"
        if not np.all(np.isfinite(out.data)):
            return None, "f(x) is not finite"
        out.backward()
        analytic = np.zeros_like(x0) if t.grad is None else t.grad
        flat = x0.reshape(-1)
        positions = range(flat.size) if indices is None else indices
        an, nu = [], []
        for i in positions:
            xp = flat.copy()
            xp[i] += step
            xm = flat.copy()
            xm[i] -= step
            fp = float(f(Tensor(xp.reshape(x0.shape), dtype=dtype)).data)
            fm = float(f(Tensor(xm.reshape(x0.shape), dtype=dtype)).data)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return None, f"non-finite f at perturbed position {i}"
            nu.append((fp - fm) / (2 * step))
            an.append(float(analytic.reshape(-1)[i]))
        return (np.asarray(an), np.asarray(nu)), ""

    if shadow:
        with shadow64():
            res, msg = run()
    else:
        res, msg = run()
    if res is None:
        return GradCheckReport(False, float("inf"), 0, msg)
    an, nu = res
    if not np.all(np.isfinite(an)):
        return GradCheckReport(False, float("inf"), an.size, "analytic gradient not finite")
    scale = max(np.abs(an).max(initial=0.0), np.abs(nu).max(initial=0.0))
    err = 0.0 if scale == 0 else float(np.abs(an - nu).max() / scale)
    passed = err <= rel_tol
    return GradCheckReport(passed, err, an.size,
                           "" if passed else f"max relative error {err:.3e} > {rel_tol:.1e}")
