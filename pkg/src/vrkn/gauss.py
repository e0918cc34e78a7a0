"""Gaussian algebra on dense and diagonal covariance representations.

Covariances are stored as variances throughout; anything emitted by a
network as a positive scale is converted to a variance at the module
boundary. Beliefs are immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = [
    "VAR_FLOOR",
    "GaussianDense",
    "GaussianDiag",
    "NotPositiveDefiniteError",
    "log_density",
    "kl_divergence",
    "condition",
    "expected_gaussian_loglik",
    "expected_gaussian_loglik_dense",
]

# Floor applied when constructing beliefs from learned outputs; keeps
# Kalman gains away from division blow-ups.
VAR_FLOOR = 1e-8

_LOG_2PI = float(np.log(2.0 * np.pi))


class NotPositiveDefiniteError(ValueError):
    """Raised when a covariance fails its Cholesky factorization."""


def _check_vector(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


@dataclass(frozen=True)
class GaussianDense:
    """Gaussian with full covariance; intended for small dimensions."""

    mean: np.ndarray
    cov: np.ndarray
    _chol: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        mean = _check_vector(self.mean, "mean")
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(
                f"cov shape {cov.shape} incompatible with mean of dim {mean.size}"
            )
        if not np.all(np.isfinite(cov)):
            raise ValueError("cov contains non-finite entries")
        if np.max(np.abs(cov - cov.T)) > 1e-10:
            raise ValueError("cov is not symmetric within 1e-10")
        try:
            chol = np.linalg.cholesky(0.5 * (cov + cov.T))
        except np.linalg.LinAlgError as err:
            raise NotPositiveDefiniteError(
                "covariance is not positive definite"
            ) from err
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class GaussianDiag:
    """Gaussian with diagonal covariance stored as a variance vector."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = _check_vector(self.mean, "mean")
        var = _check_vector(self.var, "var")
        if var.shape != mean.shape:
            raise ValueError("mean and var must have equal shapes")
        if np.any(var <= 0.0):
            raise ValueError("variances must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.size

    def to_dense(self) -> GaussianDense:
        return GaussianDense(self.mean, np.diag(self.var))


def log_density(g: GaussianDense | GaussianDiag, x) -> float:
    """log N(x | mean, cov) for either representation."""
    x = _check_vector(x, "x")
    if x.size != g.dim:
        raise ValueError(f"x has dim {x.size}, distribution has dim {g.dim}")
    if isinstance(g, GaussianDiag):
        resid = x - g.mean
        return float(
            -0.5 * np.sum(_LOG_2PI + np.log(g.var) + resid * resid / g.var)
        )
    resid = x - g.mean
    chol = g._chol
    alpha = cho_solve((chol, True), resid)
    maha = float(resid @ alpha)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (g.dim * _LOG_2PI + logdet + maha)


def kl_divergence(q: GaussianDiag, p: GaussianDiag) -> float:
    """KL(q || p) for diagonal Gaussians; always >= 0."""
    if q.dim != p.dim:
        raise ValueError("KL requires equal dimensions")
    ratio = q.var / p.var
    dmean = q.mean - p.mean
    return float(
        0.5 * np.sum(-np.log(ratio) + ratio + dmean * dmean / p.var - 1.0)
    )


def condition(joint: GaussianDense, y_obs) -> GaussianDense:
    """Condition a joint Gaussian over (x, y) on its trailing y block.

    The x block is the leading ``dim - len(y_obs)`` coordinates. Uses the
    standard conditioning identities
        mean = mu_x + S_xy S_yy^-1 (y - mu_y)
        cov  = S_xx - S_xy S_yy^-1 S_yx
    """
    y_obs = _check_vector(y_obs, "y_obs")
    ny = y_obs.size
    nx = joint.dim - ny
    if nx <= 0:
        raise ValueError("y_obs consumes the entire joint")
    mu_x, mu_y = joint.mean[:nx], joint.mean[nx:]
    s_xx = joint.cov[:nx, :nx]
    s_xy = joint.cov[:nx, nx:]
    s_yy = joint.cov[nx:, nx:]
    try:
        fac = cho_factor(s_yy)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefiniteError("singular y block") from err
    gain = cho_solve(fac, s_xy.T).T
    mean = mu_x + gain @ (y_obs - mu_y)
    cov = s_xx - gain @ s_xy.T
    cov = 0.5 * (cov + cov.T)
    # Conditioning can push tiny eigenvalues below zero in float arithmetic
    # (e.g. perfectly correlated blocks); nudge back onto the PD cone.
    try:
        return GaussianDense(mean, cov)
    except NotPositiveDefiniteError:
        return GaussianDense(mean, cov + 1e-12 * np.eye(nx))


def expected_gaussian_loglik(obs, belief: GaussianDiag, obs_var) -> float:
    """E_{z ~ belief}[log N(obs | z, obs_var)] for the identity map.

    Exact: log N(obs | mean, obs_var) minus the variance penalty
    sum_i var_i / (2 obs_var_i).
    """
    obs = _check_vector(obs, "obs")
    obs_var = _check_vector(obs_var, "obs_var")
    if obs.size != belief.dim or obs_var.size != belief.dim:
        raise ValueError("dimension mismatch")
    if np.any(obs_var <= 0.0):
        raise ValueError("obs_var must be strictly positive")
    point = log_density(GaussianDiag(belief.mean, obs_var), obs)
    return point - float(np.sum(belief.var / (2.0 * obs_var)))


def expected_gaussian_loglik_dense(obs, belief: GaussianDense, obs_var) -> float:
    """Dense-belief variant; the penalty becomes tr(diag(obs_var)^-1 cov)/2."""
    obs = _check_vector(obs, "obs")
    obs_var = _check_vector(obs_var, "obs_var")
    if obs.size != belief.dim or obs_var.size != belief.dim:
        raise ValueError("dimension mismatch")
    point = log_density(GaussianDiag(belief.mean, obs_var), obs)
    return point - float(np.sum(np.diag(belief.cov) / (2.0 * obs_var)))
