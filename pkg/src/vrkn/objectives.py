"""The two variational bounds for state-space models.

``elbo_ssm`` scores a generative model against a smoothing posterior:
reconstruction under smoothed marginals plus dynamics KL terms taken
under smoothed beliefs, with the conditionals produced by the extended
backward pass. ``elbo_rssm`` is the filtering-style bound: the posterior
over z_t is a locally linear conditional on (z_{t-1}, o_t) only, and the
KL expectation runs under filtered-style marginals, so future
observations can never revise past beliefs.

Both support an exact closed-form expectation mode for linear-Gaussian
inference families and a single-sample reparameterized Monte Carlo mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gauss import GaussianDense, GaussianDiag
from .lgssm import (
    ConditionalGaussian,
    DenseStep,
    FilterTrace,
    LgssmParams,
    LocalStep,
    SmoothTrace,
    Trajectory,
)

__all__ = [
    "ElboBreakdown",
    "LocallyLinearPosterior",
    "elbo_ssm",
    "elbo_rssm",
    "free_nats_kl",
    "expected_kl_linear_gaussians",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ElboBreakdown:
    """Aggregated bound value with its per-step reconstruction/KL terms."""

    recon: float
    kl: float
    total: float
    recon_steps: np.ndarray
    kl_steps: np.ndarray

    def __post_init__(self):
        if abs(self.total - (self.recon - self.kl)) > 1e-12:
            raise ValueError("total must equal recon - kl")
        if abs(float(np.sum(self.recon_steps)) - self.recon) > 1e-9:
            raise ValueError("per-step recon does not sum to aggregate")
        if abs(float(np.sum(self.kl_steps)) - self.kl) > 1e-9:
            raise ValueError("per-step kl does not sum to aggregate")

    @classmethod
    def from_steps(cls, recon_steps, kl_steps) -> "ElboBreakdown":
        recon_steps = np.asarray(recon_steps, dtype=np.float64)
        kl_steps = np.asarray(kl_steps, dtype=np.float64)
        recon = float(np.sum(recon_steps))
        kl = float(np.sum(kl_steps))
        return cls(recon, kl, recon - kl, recon_steps, kl_steps)


def free_nats_kl(kl_per_step, free_nats: float) -> np.ndarray:
    """Loss-side KL floor: per step max(kl_t, free_nats).

    Gradients of clipped entries vanish; reported KL stays unclipped.
    """
    kl = np.asarray(kl_per_step, dtype=np.float64)
    if free_nats < 0:
        raise ValueError("free_nats must be non-negative")
    if np.any(kl < 0):
        raise ValueError("KL values must be non-negative")
    return np.maximum(kl, free_nats)


def _as_cov(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.diag(x) if x.ndim == 1 else x


def _as_mat(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.diag(x) if x.ndim == 1 else x


def _logdet(cov: np.ndarray) -> float:
    sign, val = np.linalg.slogdet(cov)
    if sign <= 0:
        raise np.linalg.LinAlgError("covariance with non-positive determinant")
    return float(val)


def expected_kl_linear_gaussians(mean, cov, f_gain, f_off, f_cov,
                                 g_gain, g_off, g_cov) -> float:
    """E_{z ~ N(mean, cov)} KL[ N(F z + f, S) || N(G z + g, Q) ].

    Both conditionals are linear in z with constant covariances, so the
    expectation has the closed form
        0.5 * ( tr(Q^-1 S) - d + logdet Q - logdet S
                + dmu(mean)^T Q^-1 dmu(mean)
                + tr(Q^-1 (F - G) cov (F - G)^T) )
    with dmu(z) = (F - G) z + (f - g); the last trace term is the extra
    mean-discrepancy mass contributed by the spread of z.
    """
    d = np.asarray(mean).size
    S = _as_cov(f_cov, d)
    Q = _as_cov(g_cov, d)
    F = _as_mat(f_gain, d)
    G = _as_mat(g_gain, d)
    cov = _as_cov(cov, d)
    qinv = np.linalg.inv(Q)
    diff_gain = F - G
    dmu = diff_gain @ np.asarray(mean) + (np.asarray(f_off) - np.asarray(g_off))
    val = (
        np.trace(qinv @ S)
        - d
        + _logdet(Q)
        - _logdet(S)
        + dmu @ qinv @ dmu
        + np.trace(qinv @ diff_gain @ cov @ diff_gain.T)
    )
    return 0.5 * float(val)


def _kl_gaussians_dense(mean_q, cov_q, mean_p, cov_p) -> float:
    d = mean_q.size
    pinv = np.linalg.inv(cov_p)
    dmu = mean_p - mean_q
    return 0.5 * float(
        np.trace(pinv @ cov_q) - d + _logdet(cov_p) - _logdet(cov_q)
        + dmu @ pinv @ dmu
    )


def _recon_term(obs, mean, cov_diag, obs_var, mask) -> float:
    """Per-dimension expected log N(obs | z, obs_var) over N(mean, cov),
    with masked dimensions contributing zero."""
    terms = -0.5 * (
        _LOG_2PI + np.log(obs_var)
        + ((obs - mean) ** 2 + cov_diag) / obs_var
    )
    if mask is not None:
        terms = terms * mask
    return float(np.sum(terms))


def _recon_point(obs, z, obs_var, mask) -> float:
    terms = -0.5 * (_LOG_2PI + np.log(obs_var) + (obs - z) ** 2 / obs_var)
    if mask is not None:
        terms = terms * mask
    return float(np.sum(terms))


def _belief_moments(belief) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mean, dense cov, diag of cov) for either representation."""
    if isinstance(belief, GaussianDiag):
        return belief.mean, np.diag(belief.var), belief.var
    return belief.mean, belief.cov, np.diag(belief.cov)


def _step_params(step, action=None):
    if isinstance(step, DenseStep):
        return step.mat, step.offset, step.var
    if isinstance(step, LocalStep):
        return np.diag(step.a_diag), step.b, step.var_dyn
    raise TypeError(f"unexpected step type {type(step)!r}")


def _sensor_recons(params, traj, mean, cov_diag, t, sensor_vars, sample=None):
    total = 0.0
    for name, obs in traj.sensors.items():
        if not traj.valid[name][t]:
            continue
        var = params.obs_var
        if sensor_vars and name in sensor_vars:
            var = sensor_vars[name]
        mask = traj.masks.get(name)
        mask_t = None if mask is None else mask[t]
        if sample is None:
            total += _recon_term(obs[t], mean, cov_diag, var, mask_t)
        else:
            total += _recon_point(obs[t], sample, var, mask_t)
    return total


def elbo_ssm(params: LgssmParams, strace: SmoothTrace, traj: Trajectory,
             mode: str = "closed_form", ftrace: FilterTrace | None = None,
             rng: np.random.Generator | None = None,
             sensor_vars: dict | None = None) -> ElboBreakdown:
    """Smoothing bound of a trajectory under ``params`` with posterior
    given by an (extended) smoothing pass.

    The t=0 term is the reconstruction at t=0 plus
    KL[q(z_0 | all obs) || p(z_0)]; transitions contribute expected KLs
    between the smoothed dynamics and the model dynamics under the
    smoothed marginal of the earlier state.
    """
    if mode not in ("closed_form", "mc_single"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "mc_single" and rng is None:
        raise ValueError("mc_single mode needs an rng")
    T = len(strace.smoothed)
    steps = ftrace.steps if ftrace is not None else None
    recon_steps = np.zeros(T)
    kl_steps = np.zeros(T)

    samples = []
    for t in range(T):
        mean, cov, cov_diag = _belief_moments(strace.smoothed[t])
        if mode == "closed_form":
            recon_steps[t] = _sensor_recons(
                params, traj, mean, cov_diag, t, sensor_vars
            )
            samples.append(None)
        else:
            z = rng.multivariate_normal(mean, cov)
            samples.append(z)
            recon_steps[t] = _sensor_recons(
                params, traj, mean, cov_diag, t, sensor_vars, sample=z
            )

    # Initial-state term: exact KL of the smoothed z_0 against p(z_0).
    mean0, cov0, _ = _belief_moments(strace.smoothed[0])
    kl_steps[0] = _kl_gaussians_dense(
        mean0, cov0, params.init_mean, np.diag(params.init_var)
    )

    for t in range(1, T):
        cond = strace.cond_dyn[t - 1]
        action = None if traj.actions is None else traj.actions[t - 1]
        if steps is not None:
            g_gain, g_off, g_var = _step_params(steps[t - 1])
        else:
            g_gain, g_off, g_var = _step_params(params.step_at(action))
        mean_prev, cov_prev, _ = _belief_moments(strace.smoothed[t - 1])
        f_gain = _as_mat(cond.gain, mean_prev.size)
        f_cov = _as_cov(cond.cov, mean_prev.size)
        if mode == "closed_form":
            kl_steps[t] = expected_kl_linear_gaussians(
                mean_prev, cov_prev, f_gain, cond.offset, f_cov,
                g_gain, g_off, np.diag(g_var),
            )
        else:
            z_prev = samples[t - 1]
            mean_q = f_gain @ z_prev + cond.offset
            mean_p = g_gain @ z_prev + g_off
            kl_steps[t] = _kl_gaussians_dense(
                mean_q, f_cov, mean_p, np.diag(g_var)
            )
    return ElboBreakdown.from_steps(recon_steps, kl_steps)


@dataclass
class LocallyLinearPosterior:
    """Per-step linear-Gaussian conditionals q(z_t | z_{t-1}, context).

    ``conds[t-1]`` parameterizes the transition into step t; the initial
    belief is N(init_mean, diag(init_var)). Marginals are propagated by
    moment matching at the emitted linearization:
        mu_t = C_t mu_{t-1} + c_t,  cov_t = C_t cov_{t-1} C_t^T + S_t.
    """

    init_mean: np.ndarray
    init_var: np.ndarray
    conds: list[ConditionalGaussian]

    def marginals(self) -> list[GaussianDense]:
        out = [GaussianDense(self.init_mean, np.diag(self.init_var))]
        for cond in self.conds:
            prev = out[-1]
            gain = _as_mat(cond.gain, prev.dim)
            mean = gain @ prev.mean + cond.offset
            cov = gain @ prev.cov @ gain.T + _as_cov(cond.cov, prev.dim)
            out.append(GaussianDense(mean, 0.5 * (cov + cov.T)))
        return out


def elbo_rssm(params: LgssmParams, posterior: LocallyLinearPosterior,
              traj: Trajectory, mode: str = "closed_form",
              rng: np.random.Generator | None = None,
              sensor_vars: dict | None = None) -> ElboBreakdown:
    """Filtering-style bound: reconstruction under the propagated
    filtered-style marginals, KL terms under the previous filtered
    marginal rather than any smoothed belief."""
    if mode not in ("closed_form", "mc_single"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "mc_single" and rng is None:
        raise ValueError("mc_single mode needs an rng")
    marginals = posterior.marginals()
    T = len(marginals)
    if T != traj.length:
        raise ValueError("posterior length does not match trajectory")
    recon_steps = np.zeros(T)
    kl_steps = np.zeros(T)
    samples = []
    for t in range(T):
        marg = marginals[t]
        if mode == "closed_form":
            recon_steps[t] = _sensor_recons(
                params, traj, marg.mean, np.diag(marg.cov), t, sensor_vars
            )
            samples.append(None)
        else:
            z = rng.multivariate_normal(marg.mean, marg.cov)
            samples.append(z)
            recon_steps[t] = _sensor_recons(
                params, traj, marg.mean, None, t, sensor_vars, sample=z
            )

    kl_steps[0] = _kl_gaussians_dense(
        marginals[0].mean, marginals[0].cov,
        params.init_mean, np.diag(params.init_var),
    )
    for t in range(1, T):
        cond = posterior.conds[t - 1]
        action = None if traj.actions is None else traj.actions[t - 1]
        g_gain, g_off, g_var = _step_params(params.step_at(action))
        prev = marginals[t - 1]
        f_gain = _as_mat(cond.gain, prev.dim)
        f_cov = _as_cov(cond.cov, prev.dim)
        if mode == "closed_form":
            kl_steps[t] = expected_kl_linear_gaussians(
                prev.mean, prev.cov, f_gain, cond.offset, f_cov,
                g_gain, g_off, np.diag(g_var),
            )
        else:
            z_prev = samples[t - 1]
            mean_q = f_gain @ z_prev + cond.offset
            mean_p = g_gain @ z_prev + g_off
            kl_steps[t] = _kl_gaussians_dense(mean_q, f_cov, mean_p, np.diag(g_var))
    return ElboBreakdown.from_steps(recon_steps, kl_steps)
