"""Adam with optional global gradient-norm clipping."""

from __future__ import annotations

import numpy as np

from .autodiff import Param

__all__ = ["Adam", "NumericalError", "global_grad_norm"]


class NumericalError(RuntimeError):
    """Raised when training produces non-finite numbers."""


def global_grad_norm(params: list[Param]) -> float:
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


class Adam:
    """Standard Adam with bias correction; moments persist per parameter.

    When ``clip_norm`` is set, the global gradient norm is clipped before
    the update. A NaN gradient aborts the step, naming the parameter.
    """

    def __init__(self, params: list[Param], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float | None = None):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self._m = {p.name: np.zeros_like(p.data) for p in params}
        self._v = {p.name: np.zeros_like(p.data) for p in params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if np.any(np.isnan(p.grad)):
                raise NumericalError(f"NaN gradient in parameter {p.name!r}")
        scale = 1.0
        if self.clip_norm is not None:
            norm = global_grad_norm(self.params)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            g = p.grad * scale
            m = self._m[p.name] = b1 * self._m[p.name] + (1.0 - b1) * g
            v = self._v[p.name] = b2 * self._v[p.name] + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**self.t)
            v_hat = v / (1.0 - b2**self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.tolist() for k, v in self._m.items()},
            "v": {k: v.tolist() for k, v in self._v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for p in self.params:
            self._m[p.name] = np.asarray(state["m"][p.name], dtype=np.float64).reshape(p.data.shape)
            self._v[p.name] = np.asarray(state["v"][p.name], dtype=np.float64).reshape(p.data.shape)
