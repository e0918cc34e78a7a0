"""Exact inference in (locally) linear-Gaussian state-space models.

Provides Kalman prediction/update with identity observation maps,
multi-sensor fusion by repeated updates, missing-observation handling,
Rauch-Tung-Striebel smoothing extended to also emit the smoothed
dynamics conditionals, and the exact marginal log-likelihood via the
prediction-error decomposition.

Two code paths live behind one interface: a dense one for small full
transition matrices, and a diagonal one where every quantity is
elementwise. Sensor updates are applied in declared (insertion) order;
order invariance is a tested property, not an assumption.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .gauss import (
    VAR_FLOOR,
    GaussianDense,
    GaussianDiag,
    NotPositiveDefiniteError,
    log_density,
)

__all__ = [
    "LgssmParams",
    "LocalStep",
    "DenseStep",
    "Trajectory",
    "FilterTrace",
    "SmoothTrace",
    "ConditionalGaussian",
    "predict",
    "update",
    "filter_trajectory",
    "smooth",
    "smoothed_dynamics",
    "exact_loglik",
]

Belief = GaussianDense | GaussianDiag


@dataclass(frozen=True)
class LgssmParams:
    """Generative model: transition, transition noise, observation noise, init.

    ``trans_mat`` with shape (d, d) selects the dense path; shape (d,) is
    interpreted as diag(A) and selects the diagonal path. ``act_mat``
    optionally maps actions to additive transition offsets.
    """

    trans_mat: np.ndarray
    trans_offset: np.ndarray
    trans_var: np.ndarray
    obs_var: np.ndarray
    init_mean: np.ndarray
    init_var: np.ndarray
    act_mat: np.ndarray | None = None

    def __post_init__(self):
        d = np.asarray(self.init_mean).size
        for name in ("trans_offset", "trans_var", "obs_var", "init_mean", "init_var"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if name == "trans_var" and v.ndim == 0:
                v = np.full(d, float(v))
            if v.shape != (d,):
                raise ValueError(f"{name} must have shape ({d},)")
            object.__setattr__(self, name, v)
        mat = np.asarray(self.trans_mat, dtype=np.float64)
        if mat.shape not in ((d, d), (d,)):
            raise ValueError("trans_mat must be (d, d) or (d,)")
        if not np.all(np.isfinite(mat)):
            raise ValueError("trans_mat contains non-finite entries")
        object.__setattr__(self, "trans_mat", mat)
        if np.any(self.trans_var < 0) or np.any(self.obs_var <= 0) or np.any(self.init_var <= 0):
            raise ValueError("variance entries must be positive")
        if self.act_mat is not None:
            am = np.asarray(self.act_mat, dtype=np.float64)
            if am.ndim != 2 or am.shape[0] != d:
                raise ValueError("act_mat must have shape (d, action_dim)")
            object.__setattr__(self, "act_mat", am)

    @property
    def dim(self) -> int:
        return self.init_mean.size

    @property
    def dense(self) -> bool:
        return self.trans_mat.ndim == 2

    def init_belief(self) -> Belief:
        if self.dense:
            return GaussianDense(self.init_mean, np.diag(self.init_var))
        return GaussianDiag(self.init_mean, self.init_var)

    def step_at(self, action: np.ndarray | None) -> "DenseStep | LocalStep":
        offset = self.trans_offset
        if self.act_mat is not None and action is not None:
            offset = offset + self.act_mat @ action
        if self.dense:
            return DenseStep(self.trans_mat, offset, self.trans_var)
        return LocalStep(self.trans_mat, offset, self.trans_var)


@dataclass(frozen=True)
class LocalStep:
    """One linearized diagonal transition: z' ~ N(a_diag * z + b, var_dyn)."""

    a_diag: np.ndarray
    b: np.ndarray
    var_dyn: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a_diag, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        v = np.asarray(self.var_dyn, dtype=np.float64)
        if not (a.shape == b.shape == v.shape) or a.ndim != 1:
            raise ValueError("LocalStep fields must be equal-length vectors")
        if np.any(v < 0):
            raise ValueError("var_dyn must be non-negative")
        object.__setattr__(self, "a_diag", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "var_dyn", v)


@dataclass(frozen=True)
class DenseStep:
    """One dense transition: z' ~ N(mat @ z + offset, diag(var))."""

    mat: np.ndarray
    offset: np.ndarray
    var: np.ndarray


@dataclass
class Trajectory:
    """Observed sequences per sensor plus validity flags and actions.

    Observations live in the filter's observation space (the identity
    map for this module); per-dimension ``masks`` only affect
    reconstruction objectives, never the Kalman updates.
    """

    sensors: dict[str, np.ndarray]
    valid: dict[str, np.ndarray] = field(default_factory=dict)
    actions: np.ndarray | None = None
    states: np.ndarray | None = None
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.sensors:
            raise ValueError("trajectory needs at least one sensor")
        lengths = set()
        for name, obs in self.sensors.items():
            obs = np.asarray(obs, dtype=np.float64)
            if obs.ndim != 2:
                raise ValueError(f"sensor {name!r} must be (T, dim)")
            self.sensors[name] = obs
            lengths.add(obs.shape[0])
        if len(lengths) != 1:
            raise ValueError("sensors disagree on sequence length")
        T = lengths.pop()
        for name in self.sensors:
            if name not in self.valid:
                self.valid[name] = np.ones(T, dtype=bool)
            flags = np.asarray(self.valid[name], dtype=bool)
            if flags.shape != (T,):
                raise ValueError(f"valid flags for {name!r} must be (T,)")
            self.valid[name] = flags

    @property
    def length(self) -> int:
        return next(iter(self.sensors.values())).shape[0]


@dataclass(frozen=True)
class ConditionalGaussian:
    """Linear-Gaussian conditional z' | z ~ N(gain @ z + offset, cov)."""

    gain: np.ndarray
    offset: np.ndarray
    cov: np.ndarray  # (d, d) dense or (d,) diagonal variances


@dataclass
class FilterTrace:
    priors: list[Belief]
    posteriors: list[Belief]
    steps: list[DenseStep | LocalStep]

    def __post_init__(self):
        if len(self.priors) != len(self.posteriors):
            raise ValueError("trace lengths inconsistent")
        if len(self.steps) != max(len(self.priors) - 1, 0):
            raise ValueError("need exactly T-1 transition steps")


@dataclass
class SmoothTrace:
    smoothed: list[Belief]
    gains: list[np.ndarray]
    cond_dyn: list[ConditionalGaussian]


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite values in {what}")


def predict(belief: Belief, step) -> Belief:
    """Propagate a belief through one transition.

    Dense: mean' = A mean + b, cov' = A cov A^T + diag(var).
    Diagonal: mean'_i = a_i mean_i + b_i, var'_i = a_i^2 var_i + var_dyn_i.
    """
    if isinstance(step, LgssmParams):
        step = step.step_at(None)
    if isinstance(step, DenseStep):
        if not isinstance(belief, GaussianDense):
            belief = belief.to_dense()
        if step.mat.shape[0] != belief.dim:
            raise ValueError("transition dimension mismatch")
        mean = step.mat @ belief.mean + step.offset
        cov = step.mat @ belief.cov @ step.mat.T + np.diag(step.var)
        return GaussianDense(mean, 0.5 * (cov + cov.T))
    if not isinstance(belief, GaussianDiag):
        raise ValueError("diagonal step applied to dense belief")
    if step.a_diag.size != belief.dim:
        raise ValueError("transition dimension mismatch")
    mean = step.a_diag * belief.mean + step.b
    var = step.a_diag**2 * belief.var + step.var_dyn
    return GaussianDiag(mean, var)


def update(prior: Belief, w, var_w) -> Belief:
    """Kalman update for an identity observation map (Bayes rule)."""
    w = np.asarray(w, dtype=np.float64)
    var_w = np.asarray(var_w, dtype=np.float64)
    if w.shape != (prior.dim,) or var_w.shape != (prior.dim,):
        raise ValueError("observation dimension mismatch")
    if np.any(var_w <= 0.0):
        raise ValueError("observation variances must be strictly positive")
    if isinstance(prior, GaussianDiag):
        gain = prior.var / (prior.var + var_w)
        mean = prior.mean + gain * (w - prior.mean)
        var = (1.0 - gain) * prior.var
        return GaussianDiag(mean, np.maximum(var, VAR_FLOOR))
    innov_cov = prior.cov + np.diag(var_w)
    fac = cho_factor(innov_cov)
    gain = cho_solve(fac, prior.cov).T
    mean = prior.mean + gain @ (w - prior.mean)
    cov = (np.eye(prior.dim) - gain) @ prior.cov
    return GaussianDense(mean, 0.5 * (cov + cov.T))


DynamicsFn = Callable[[np.ndarray, np.ndarray | None, int], LocalStep]


def filter_trajectory(
    model: LgssmParams,
    traj: Trajectory,
    sensor_vars: dict[str, np.ndarray] | None = None,
    dynamics_fn: DynamicsFn | None = None,
) -> FilterTrace:
    """Kalman-filter a trajectory.

    The prior at t=0 is the initial distribution and the update runs
    first in every step. The predict uses the static transition or, when
    ``dynamics_fn`` is given, a per-step linearization evaluated at the
    posterior mean and action. Invalid sensor flags skip their update
    entirely; an all-invalid step leaves posterior equal to prior.
    """
    belief = model.init_belief()
    default_var = model.obs_var
    T = traj.length
    priors: list[Belief] = []
    posteriors: list[Belief] = []
    steps: list[DenseStep | LocalStep] = []
    for t in range(T):
        priors.append(belief)
        post = belief
        for name, obs in traj.sensors.items():
            if not traj.valid[name][t]:
                continue
            o_t = obs[t]
            _check_finite(o_t, f"observation {name!r} at t={t}")
            var_w = sensor_vars[name] if sensor_vars and name in sensor_vars else default_var
            post = update(post, o_t, var_w)
        posteriors.append(post)
        if t + 1 < T:
            action = None
            if traj.actions is not None:
                action = np.asarray(traj.actions[t], dtype=np.float64)
                _check_finite(action, f"action at t={t}")
            if dynamics_fn is not None:
                step = dynamics_fn(np.asarray(post.mean), action, t)
            else:
                step = model.step_at(action)
            steps.append(step)
            belief = predict(post, step)
    return FilterTrace(priors, posteriors, steps)


def _smooth_step_dense(post, prior_next, smoothed_next, mat):
    fac = cho_factor(prior_next.cov)
    # C = post.cov @ A^T @ inv(prior_next.cov)
    gain = cho_solve(fac, mat @ post.cov).T
    mean = post.mean + gain @ (smoothed_next.mean - prior_next.mean)
    cov = (np.eye(post.dim) - gain @ mat) @ post.cov + gain @ smoothed_next.cov @ gain.T
    return GaussianDense(mean, 0.5 * (cov + cov.T)), gain


def _smooth_step_diag(post, prior_next, smoothed_next, a_diag):
    gain = post.var * a_diag / np.maximum(prior_next.var, VAR_FLOOR)
    mean = post.mean + gain * (smoothed_next.mean - prior_next.mean)
    var = (1.0 - gain * a_diag) * post.var + gain**2 * smoothed_next.var
    return GaussianDiag(mean, np.maximum(var, VAR_FLOOR)), gain


def smooth(trace: FilterTrace) -> SmoothTrace:
    """Extended Rauch-Tung-Striebel backward pass.

    Recursion base: the smoothed belief at T-1 equals the last posterior.
    Backward step (dense form):
        C_t   = cov+_t A_t^T (cov-_{t+1})^-1
        mu_s  = mu+_t + C_t (mu_s_{t+1} - mu-_{t+1})
        cov_s = (I - C_t A_t) cov+_t + C_t cov_s_{t+1} C_t^T
    The smoothed dynamics conditional for the t -> t+1 transition is read
    off the two-slice joint in the same sweep:
        J_t    = cov_s_{t+1} C_t^T (cov_s_t)^-1
        offset = mu_s_{t+1} - J_t mu_s_t
        cov    = cov_s_{t+1} - J_t C_t cov_s_{t+1}
    """
    T = len(trace.posteriors)
    smoothed: list[Belief] = [None] * T
    smoothed[T - 1] = trace.posteriors[T - 1]
    gains: list[np.ndarray] = [None] * max(T - 1, 0)
    cond: list[ConditionalGaussian] = [None] * max(T - 1, 0)
    for t in range(T - 2, -1, -1):
        step = trace.steps[t]
        post = trace.posteriors[t]
        prior_next = trace.priors[t + 1]
        sm_next = smoothed[t + 1]
        if isinstance(step, DenseStep):
            try:
                sm, gain = _smooth_step_dense(post, prior_next, sm_next, step.mat)
            except np.linalg.LinAlgError as err:
                raise NotPositiveDefiniteError("singular prior covariance") from err
            cross = gain @ sm_next.cov  # Cov(z_t, z_{t+1} | all obs)
            fac = cho_factor(sm.cov)
            j_gain = cho_solve(fac, cross).T
            offset = sm_next.mean - j_gain @ sm.mean
            ccov = sm_next.cov - j_gain @ cross
            cond[t] = ConditionalGaussian(j_gain, offset, 0.5 * (ccov + ccov.T))
        else:
            sm, gain = _smooth_step_diag(post, prior_next, sm_next, step.a_diag)
            cross = gain * sm_next.var
            j_gain = cross / np.maximum(sm.var, VAR_FLOOR)
            offset = sm_next.mean - j_gain * sm.mean
            cvar = sm_next.var - j_gain * cross
            cond[t] = ConditionalGaussian(j_gain, offset, np.maximum(cvar, 0.0))
        smoothed[t] = sm
        gains[t] = gain
    return SmoothTrace(smoothed, gains, cond)


def smoothed_dynamics(strace: SmoothTrace) -> Sequence[ConditionalGaussian]:
    """Per-step conditionals q(z_{t+1} | z_t, future observations)."""
    return strace.cond_dyn


def exact_loglik(params: LgssmParams, traj: Trajectory,
                 sensor_vars: dict[str, np.ndarray] | None = None) -> float:
    """Exact log p(o_{0..T-1}) by the prediction-error decomposition.

    Each observation contributes log N(o | mu, cov + obs_var) against the
    belief current at its update, so multi-sensor steps chain exactly.
    Requires a static model with every observation valid.
    """
    for name, flags in traj.valid.items():
        if not np.all(flags):
            raise ValueError(f"exact_loglik requires all-valid observations ({name!r})")
    belief = params.init_belief()
    total = 0.0
    T = traj.length
    for t in range(T):
        for name, obs in traj.sensors.items():
            var_w = sensor_vars[name] if sensor_vars and name in sensor_vars else params.obs_var
            o_t = obs[t]
            _check_finite(o_t, f"observation {name!r} at t={t}")
            if isinstance(belief, GaussianDiag):
                marg = GaussianDiag(belief.mean, belief.var + var_w)
            else:
                marg = GaussianDense(belief.mean, belief.cov + np.diag(var_w))
            total += log_density(marg, o_t)
            belief = update(belief, o_t, var_w)
        if t + 1 < T:
            action = None if traj.actions is None else traj.actions[t]
            belief = predict(belief, params.step_at(action))
    return float(total)
