"""Independent reference computations used as test oracles.

Everything here deliberately avoids the recursions under test: beliefs
are recovered by building the full joint Gaussian over all states and
observations and conditioning it directly.
"""

import numpy as np

from vrkn.gauss import GaussianDense, condition
from vrkn.lgssm import LgssmParams, Trajectory


def dense_trans_mat(params: LgssmParams) -> np.ndarray:
    if params.dense:
        return params.trans_mat
    return np.diag(params.trans_mat)


def joint_prior(params: LgssmParams, T: int, actions=None):
    """Mean and covariance of the stacked state vector (z_0, ..., z_{T-1})."""
    d = params.dim
    A = dense_trans_mat(params)
    mean = np.zeros(T * d)
    cov = np.zeros((T * d, T * d))
    mean[:d] = params.init_mean
    cov[:d, :d] = np.diag(params.init_var)
    for t in range(T - 1):
        off = params.trans_offset.copy()
        if params.act_mat is not None and actions is not None:
            off = off + params.act_mat @ np.asarray(actions[t])
        lo, hi = t * d, (t + 1) * d
        mean[hi:hi + d] = A @ mean[lo:hi] + off
        # Cov(z_{t+1}, z_s) = A Cov(z_t, z_s) for s <= t
        for s in range(t + 1):
            blk = A @ cov[lo:hi, s * d:(s + 1) * d]
            cov[hi:hi + d, s * d:(s + 1) * d] = blk
            cov[s * d:(s + 1) * d, hi:hi + d] = blk.T
        cov[hi:hi + d, hi:hi + d] = (
            A @ cov[lo:hi, lo:hi] @ A.T + np.diag(params.trans_var)
        )
    return mean, cov


def joint_with_observations(params: LgssmParams, traj: Trajectory,
                            sensor_vars=None):
    """Joint Gaussian over (z_{0..T-1}, stacked valid observations).

    Returns the joint plus the list of (sensor, t) pairs in stacking
    order and the flat observed values.
    """
    T = traj.length
    d = params.dim
    z_mean, z_cov = joint_prior(params, T, traj.actions)
    entries = []
    for name in traj.sensors:
        for t in range(T):
            if traj.valid[name][t]:
                entries.append((name, t))
    m = len(entries)
    mean = np.zeros(T * d + m * d)
    cov = np.zeros((T * d + m * d, T * d + m * d))
    mean[: T * d] = z_mean
    cov[: T * d, : T * d] = z_cov
    obs_flat = np.zeros(m * d)
    for i, (name, t) in enumerate(entries):
        var = params.obs_var
        if sensor_vars and name in sensor_vars:
            var = sensor_vars[name]
        oi = T * d + i * d
        zi = t * d
        # o = z_t + noise: copy the z_t rows/cols of the covariance
        cov[oi:oi + d, : T * d] = z_cov[zi:zi + d, :]
        cov[: T * d, oi:oi + d] = z_cov[:, zi:zi + d]
        mean[oi:oi + d] = z_mean[zi:zi + d]
        obs_flat[i * d:(i + 1) * d] = traj.sensors[name][t]
        for j, (name2, t2) in enumerate(entries):
            oj = T * d + j * d
            blk = z_cov[zi:zi + d, t2 * d:(t2 + 1) * d].copy()
            if i == j:
                blk = blk + np.diag(var)
            cov[oi:oi + d, oj:oj + d] = blk
    cov = 0.5 * (cov + cov.T)
    return GaussianDense(mean, cov), entries, obs_flat


def brute_force_posterior(params: LgssmParams, traj: Trajectory,
                          upto: int | None = None, sensor_vars=None):
    """Joint conditional over all states given observations up to ``upto``
    (inclusive; None means all). Returns a GaussianDense over (T*d,)."""
    T = traj.length
    if upto is None:
        upto = T - 1
    clipped = Trajectory(
        sensors={k: v.copy() for k, v in traj.sensors.items()},
        valid={
            k: np.where(np.arange(T) <= upto, v, False)
            for k, v in traj.valid.items()
        },
        actions=None if traj.actions is None else traj.actions.copy(),
    )
    joint, entries, obs_flat = joint_with_observations(params, clipped, sensor_vars)
    return condition(joint, obs_flat)


def marginal_of(joint: GaussianDense, t: int, d: int) -> GaussianDense:
    lo = t * d
    return GaussianDense(joint.mean[lo:lo + d], joint.cov[lo:lo + d, lo:lo + d])


def cross_block(joint: GaussianDense, t1: int, t2: int, d: int) -> np.ndarray:
    return joint.cov[t1 * d:(t1 + 1) * d, t2 * d:(t2 + 1) * d]


def random_lgssm(rng: np.random.Generator, d: int, dense: bool = True,
                 with_offset: bool = True) -> LgssmParams:
    """A random, stable, well-conditioned model for oracle comparisons."""
    if dense:
        raw = rng.normal(size=(d, d))
        # scale to spectral radius ~0.9 for stability
        eig = np.max(np.abs(np.linalg.eigvals(raw)))
        mat = 0.9 * raw / max(eig, 1e-6)
    else:
        mat = rng.uniform(0.3, 0.95, size=d)
    return LgssmParams(
        trans_mat=mat,
        trans_offset=rng.normal(scale=0.3, size=d) if with_offset else np.zeros(d),
        trans_var=rng.uniform(0.05, 0.4, size=d),
        obs_var=rng.uniform(0.05, 0.5, size=d),
        init_mean=rng.normal(scale=0.5, size=d),
        init_var=rng.uniform(0.3, 1.5, size=d),
    )


def random_trajectory(rng: np.random.Generator, params: LgssmParams, T: int,
                      n_sensors: int = 1, p_valid: float = 1.0) -> Trajectory:
    """Ancestral sample from the model, optionally dropping observations."""
    d = params.dim
    A = dense_trans_mat(params)
    z = rng.normal(params.init_mean, np.sqrt(params.init_var))
    sensors = {f"s{k}": np.zeros((T, d)) for k in range(n_sensors)}
    valid = {}
    states = np.zeros((T, d))
    for t in range(T):
        states[t] = z
        for k in range(n_sensors):
            sensors[f"s{k}"][t] = z + rng.normal(0.0, np.sqrt(params.obs_var))
        if t + 1 < T:
            z = A @ z + params.trans_offset + rng.normal(0.0, np.sqrt(params.trans_var))
    for k in range(n_sensors):
        if p_valid >= 1.0:
            valid[f"s{k}"] = np.ones(T, dtype=bool)
        else:
            valid[f"s{k}"] = rng.random(T) < p_valid
    return Trajectory(sensors=sensors, valid=valid, states=states)
