"""Verification suites: gradient checks, oracle equivalence, bound
tightness, and fusion/missing-data contracts.

Each suite returns a list of CheckResult rows so the CLI can print a
pass/fail table and the test suite can assert on the same code path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Param

__all__ = ["CheckResult", "finite_difference_grad", "check_gradients"]


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""


def finite_difference_grad(fn: Callable[[], float], value: np.ndarray,
                           eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``fn`` with respect to ``value``.

    ``fn`` must read ``value`` by reference (e.g. a Param's ``.data``);
    entries are perturbed in place and restored.
    """
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn()
        flat[i] = orig - eps
        f_minus = fn()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, 1)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(loss_fn: Callable[[], "object"], params: Sequence[Param],
                    eps: float = 1e-5, coords: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Compare tape gradients of a scalar loss against central differences.

    Returns the worst relative error over all checked coordinates. When
    ``coords`` is given, only that many randomly chosen scalar entries
    (across all params) are finite-differenced; otherwise every entry is.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {p.name: p.grad.copy() for p in params}

    def value_fn() -> float:
        return float(loss_fn().data)

    worst = 0.0
    if coords is None:
        for p in params:
            numeric = finite_difference_grad(value_fn, p.data, eps)
            worst = max(worst, relative_grad_error(analytic[p.name], numeric))
        return worst
    sizes = [p.data.size for p in params]
    total = int(np.sum(sizes))
    idx = rng.choice(total, size=min(coords, total), replace=False)
    bounds = np.cumsum([0] + sizes)
    for k in sorted(int(i) for i in idx):
        which = int(np.searchsorted(bounds, k, side="right") - 1)
        p = params[which]
        local = k - bounds[which]
        flat = p.data.reshape(-1)
        orig = flat[local]
        flat[local] = orig + eps
        f_plus = value_fn()
        flat[local] = orig - eps
        f_minus = value_fn()
        flat[local] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[p.name].reshape(-1)[local]
        denom = max(abs(a), abs(numeric), 1.0)
        worst = max(worst, abs(a - numeric) / denom)
    return worst
