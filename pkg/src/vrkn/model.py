"""Latent Kalman model for vector observations.

Per-sensor encoders emit a latent-space observation with its own
uncertainty; beliefs are updated by elementwise Kalman fusion (identity
observation map, diagonal covariances) and propagated by a locally
linear dynamics network evaluated at the posterior mean. Training
maximizes the smoothing bound: filter, run the extended backward pass,
reconstruct from single smoothed samples, and penalize the dynamics KL
with a free-nats floor. Online use filters only; Monte Carlo dropout in
the dynamics network carries the epistemic signal.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor, make_rng, no_grad
from .gauss import VAR_FLOOR
from .layers import BoundedSigmoid, GruCell, Linear, Mlp, dropout
from .lgssm import Trajectory
from .optim import Adam, NumericalError
from .tasks import TaskSpec

__all__ = [
    "SensorConfig",
    "VrknConfig",
    "Vrkn",
    "Trainer",
    "epistemic_spread",
    "stack_batch",
]

_LOG_2PI = math.log(2.0 * math.pi)

A_DIAG_ACT = BoundedSigmoid(0.1, 0.99, 0.9)
VAR_DYN_ACT = BoundedSigmoid(0.001, 0.1, 0.01)


def _fused_update(mean, var, w, vw, flag: np.ndarray | None):
    """Masked elementwise Kalman update as two tape nodes.

    k = var / (var + vw) scaled by the 0/1 validity flag; flag 0 makes
    the posterior bitwise equal to the prior. Hand-derived vjps keep the
    recurrent graph small.
    """
    m, v, wd, vwd = mean.data, var.data, w.data, vw.data
    denom = v + vwd
    k = v / denom
    k_eff = k if flag is None else flag * k
    innov = wd - m
    out_mean = m + k_eff * innov
    out_var = v * (1.0 - k_eff)
    dk_dv = vwd / (denom * denom)
    dk_dvw = -v / (denom * denom)
    scale = 1.0 if flag is None else flag

    mean_node = ad._result(
        out_mean,
        (mean, var, w, vw),
        (
            lambda g: g * (1.0 - k_eff),
            lambda g: g * scale * dk_dv * innov,
            lambda g: g * k_eff,
            lambda g: g * scale * dk_dvw * innov,
        ),
    )
    var_node = ad._result(
        out_var,
        (var, vw),
        (
            lambda g: g * (1.0 - scale * (dk_dv * v + k)),
            lambda g: g * (-scale) * v * dk_dvw,
        ),
    )
    return mean_node, var_node


def _fused_predict(mean, var, a, b, q):
    """mean' = a * mean + b, var' = a^2 * var + q as two tape nodes."""
    m, v, a_d = mean.data, var.data, a.data
    mean_node = ad._result(
        a_d * m + b.data,
        (mean, a, b),
        (
            lambda g: g * a_d,
            lambda g: g * m,
            lambda g: g,
        ),
    )
    var_node = ad._result(
        a_d * a_d * v + q.data,
        (var, a, q),
        (
            lambda g: g * a_d * a_d,
            lambda g: g * 2.0 * a_d * v,
            lambda g: g,
        ),
    )
    return mean_node, var_node


def _fused_smooth_step(p_mean, p_var, pr_mean, pr_var, sm_mean, sm_var, a):
    """One extended-RTS backward step, elementwise, as five tape nodes.

    With c = p_var * a / pr_var:
        mean = p_mean + c (sm_mean - pr_mean)
        var  = (1 - c a) p_var + c^2 sm_var
        j    = c sm_var / var
        off  = sm_mean - j mean
        cvar = sm_var - j c sm_var
    The j/off/cvar nodes take the freshly built mean/var nodes as
    parents, so their vjps only need partials through c and their direct
    inputs; everything upstream flows through the mean/var nodes.
    """
    pv, prv, smv = p_var.data, pr_var.data, sm_var.data
    a_d = a.data
    c = pv * a_d / prv
    delta = sm_mean.data - pr_mean.data
    # partials of c wrt (p_var, a, pr_var)
    dc_dpv = a_d / prv
    dc_da = pv / prv
    dc_dprv = -c / prv

    mean_node = ad._result(
        p_mean.data + c * delta,
        (p_mean, p_var, pr_mean, pr_var, sm_mean, a),
        (
            lambda g: g,
            lambda g: g * delta * dc_dpv,
            lambda g: g * (-c),
            lambda g: g * delta * dc_dprv,
            lambda g: g * c,
            lambda g: g * delta * dc_da,
        ),
    )
    # var = p_var - c a p_var + c^2 sm_var; d(var)/dc = 2 c sm_var - a p_var
    dvar_dc = 2.0 * c * smv - a_d * pv
    var_data = (1.0 - c * a_d) * pv + c * c * smv
    var_node = ad._result(
        var_data,
        (p_var, pr_var, sm_var, a),
        (
            lambda g: g * ((1.0 - c * a_d) + dvar_dc * dc_dpv),
            lambda g: g * dvar_dc * dc_dprv,
            lambda g: g * c * c,
            lambda g: g * (-c * pv + dvar_dc * dc_da),
        ),
    )
    var_d = var_data
    j = c * smv / var_d
    j_node = ad._result(
        j,
        (p_var, pr_var, sm_var, a, var_node),
        (
            lambda g: g * (smv / var_d) * dc_dpv,
            lambda g: g * (smv / var_d) * dc_dprv,
            lambda g: g * c / var_d,
            lambda g: g * (smv / var_d) * dc_da,
            lambda g: g * (-j / var_d),
        ),
    )
    off_node = ad._result(
        sm_mean.data - j * mean_node.data,
        (sm_mean, j_node, mean_node),
        (
            lambda g: g,
            lambda g, md=mean_node.data: g * (-md),
            lambda g: g * (-j),
        ),
    )
    # cvar = sm_var - j c sm_var = sm_var (1 - j c)
    cvar_node = ad._result(
        smv * (1.0 - j * c),
        (sm_var, j_node, p_var, pr_var, a),
        (
            lambda g: g * (1.0 - j * c),
            lambda g: g * (-c * smv),
            lambda g: g * (-j * smv) * dc_dpv,
            lambda g: g * (-j * smv) * dc_dprv,
            lambda g: g * (-j * smv) * dc_da,
        ),
    )
    return mean_node, var_node, j_node, off_node, cvar_node


@dataclass(frozen=True)
class SensorConfig:
    name: str
    obs_dim: int
    decoder_loss_scale: float = 1.0
    encode: bool = True  # decoder-only streams (reward heads) set False

    def __post_init__(self):
        if self.obs_dim < 1 or self.decoder_loss_scale <= 0:
            raise ValueError("obs_dim must be >= 1 and loss scale > 0")


@dataclass(frozen=True)
class VrknConfig:
    sensors: tuple[SensorConfig, ...]
    action_dim: int
    latent_dim: int = 32
    hidden_width: int = 64
    dropout_rate: float = 0.1
    free_nats: float = 3.0
    missing_mode: str = "skip"  # "skip" | "concat"

    def __post_init__(self):
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.missing_mode not in ("skip", "concat"):
            raise ValueError(f"unknown missing_mode {self.missing_mode!r}")
        sensors = tuple(
            s if isinstance(s, SensorConfig) else SensorConfig(**s)
            for s in self.sensors
        )
        if not any(s.encode for s in sensors):
            raise ValueError("need at least one encoded sensor")
        names = [s.name for s in sensors]
        if len(set(names)) != len(names):
            raise ValueError("sensor names must be unique")
        object.__setattr__(self, "sensors", sensors)

    @classmethod
    def for_task(cls, task: TaskSpec, **kwargs) -> "VrknConfig":
        sensors = tuple(
            SensorConfig(name=n, obs_dim=d) for n, d in task.sensor_dims().items()
        )
        return cls(sensors=sensors, action_dim=task.action_dim, **kwargs)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "VrknConfig":
        raw = json.loads(text)
        raw["sensors"] = tuple(SensorConfig(**s) for s in raw["sensors"])
        return cls(**raw)


def stack_batch(trajs: list[Trajectory]) -> dict:
    """Stack equal-length trajectories into dense batch arrays; validity
    becomes float 0/1 so it can gate updates inside the graph."""
    names = list(trajs[0].sensors)
    batch = {
        "obs": {n: np.stack([t.sensors[n] for t in trajs]) for n in names},
        "valid": {
            n: np.stack([t.valid[n] for t in trajs]).astype(np.float64)
            for n in names
        },
        "masks": {
            n: np.stack([t.masks[n] for t in trajs]).astype(np.float64)
            for n in names
            if n in trajs[0].masks
        },
        "actions": np.stack([t.actions for t in trajs]),
    }
    if trajs[0].states is not None:
        batch["states"] = np.stack([t.states for t in trajs])
    return batch


def _slice_batch(batch: dict, idx: np.ndarray, t0: int, t1: int) -> dict:
    out = {
        "obs": {n: v[idx, t0:t1] for n, v in batch["obs"].items()},
        "valid": {n: v[idx, t0:t1] for n, v in batch["valid"].items()},
        "masks": {n: v[idx, t0:t1] for n, v in batch["masks"].items()},
        "actions": batch["actions"][idx, t0:t1],
    }
    return out


class Vrkn:
    """Model parameters and the differentiable inference/training graph."""

    def __init__(self, config: VrknConfig, seed: int = 0):
        self.config = config
        d, h = config.latent_dim, config.hidden_width
        rng = make_rng(seed, "vrkn-init")
        self.encoders: dict[str, dict] = {}
        self.decoders: dict[str, Mlp] = {}
        for s in config.sensors:
            if s.encode:
                in_dim = s.obs_dim + (1 if config.missing_mode == "concat" else 0)
                trunk = [
                    Linear(in_dim, h, rng, f"enc.{s.name}.trunk.l0"),
                    Linear(h, h, rng, f"enc.{s.name}.trunk.l1"),
                ]
                mean_head = Linear(h, d, rng, f"enc.{s.name}.mean")
                var_head = Linear(h, d, rng, f"enc.{s.name}.var")
                self.encoders[s.name] = {
                    "trunk": trunk, "mean": mean_head, "var": var_head,
                }
            self.decoders[s.name] = Mlp(
                [d, h, h, s.obs_dim], rng, f"dec.{s.name}"
            )
        self.phi_in = Linear(d + config.action_dim, h, rng, "phi.in")
        self.phi_gru = GruCell(h, d, rng, "phi.gru")
        self.phi_out = Linear(d, h, rng, "phi.out")
        self.phi_a = Linear(h, d, rng, "phi.a")
        self.phi_b = Linear(h, d, rng, "phi.b")
        self.phi_var = Linear(h, d, rng, "phi.var")
        # learned initial variance, softplus-parameterized, starts at 1
        self.init_rho = Param(
            np.full(d, math.log(math.expm1(1.0))), "init.rho"
        )

    def parameters(self) -> list[Param]:
        params: list[Param] = [self.init_rho]
        for enc in self.encoders.values():
            for layer in enc["trunk"]:
                params += layer.parameters()
            params += enc["mean"].parameters() + enc["var"].parameters()
        for dec in self.decoders.values():
            params += dec.parameters()
        for part in (self.phi_in, self.phi_gru, self.phi_out,
                     self.phi_a, self.phi_b, self.phi_var):
            params += part.parameters()
        return params

    # components -------------------------------------------------------

    def encode(self, name: str, obs, flags=None):
        """(w, var_w) latent observation and its variance for one sensor.

        ``obs`` is (N, obs_dim); in concat mode the validity flag column
        is appended to the input features.
        """
        if not np.all(np.isfinite(np.asarray(obs if not isinstance(obs, Tensor) else obs.data))):
            raise ValueError(f"non-finite observations for sensor {name!r}")
        enc = self.encoders[name]
        x = ad.as_tensor(obs)
        if self.config.missing_mode == "concat":
            if flags is None:
                flags = np.ones((x.shape[0], 1))
            x = ad.concat([x, ad.as_tensor(flags)], axis=-1)
        hidden = x
        for layer in enc["trunk"]:
            hidden = layer(hidden, act_relu=True)
        w = enc["mean"](hidden)
        var_w = ad.softplus(enc["var"](hidden)) + VAR_FLOOR
        return w, var_w

    def dynamics_phi(self, post_mean, action, rng, dropout_on: bool):
        """Locally linear transition (a_diag, b, var_dyn) at the posterior
        mean; the GRU receives the posterior mean at its memory input and
        dropout applies after the input layer, the gated unit, and the
        post-GRU linear layer."""
        post_mean = ad.as_tensor(post_mean)
        action = ad.as_tensor(action)
        rate = self.config.dropout_rate
        use_drop = dropout_on and rate > 0.0

        def mask(shape):
            if not use_drop:
                return None
            return (rng.random(shape) >= rate) / (1.0 - rate)

        n = post_mean.shape[0]
        h_w = self.config.hidden_width
        x = self.phi_in(
            ad.concat([post_mean, action], axis=-1),
            act_relu=True, drop_mask=mask((n, h_w)),
        )
        h = self.phi_gru(x, post_mean)
        h = dropout(h, rate, rng, use_drop)
        y = self.phi_out(h, act_relu=True, drop_mask=mask((n, h_w)))
        a_diag = A_DIAG_ACT(self.phi_a(y))
        b = self.phi_b(y)
        var_dyn = VAR_DYN_ACT(self.phi_var(y))
        return a_diag, b, var_dyn

    def init_belief(self, batch_size: int):
        mean = Tensor(np.zeros((batch_size, self.config.latent_dim)))
        var = ad.softplus(self.init_rho) + ad.as_tensor(
            np.zeros((batch_size, self.config.latent_dim))
        )
        return mean, var

    # inference --------------------------------------------------------

    def _encode_all(self, batch: dict):
        """Encode every (sensor, step) at once; returns per-sensor
        (B, T, latent) tensors."""
        out = {}
        for s in self.config.sensors:
            if not s.encode:
                continue
            obs = batch["obs"][s.name]
            B, T, dim = obs.shape
            flags = batch["valid"][s.name].reshape(B * T, 1)
            w, var_w = self.encode(s.name, obs.reshape(B * T, dim), flags)
            out[s.name] = (
                ad.reshape(w, (B, T, self.config.latent_dim)),
                ad.reshape(var_w, (B, T, self.config.latent_dim)),
            )
        return out

    def filter_batch(self, batch: dict, rng, dropout_on: bool):
        """Forward pass: per step, one masked Kalman update per encoded
        sensor in declared order, then predict through the dynamics
        network at the posterior mean.

        Invalid flags scale the innovation to exactly zero in skip mode,
        which leaves the posterior bitwise equal to the prior. In concat
        mode, updates always apply and the flag is an encoder feature.
        Returns per-step beliefs plus the local transitions.
        """
        some = next(iter(batch["obs"].values()))
        B, T = some.shape[0], some.shape[1]
        encoded = self._encode_all(batch)
        mean, var = self.init_belief(B)
        skip_mode = self.config.missing_mode == "skip"
        priors, posts, steps = [], [], []
        for t in range(T):
            priors.append((mean, var))
            for s in self.config.sensors:
                if not s.encode:
                    continue
                w_all, vw_all = encoded[s.name]
                flag = None
                if skip_mode:
                    flag = batch["valid"][s.name][:, t][:, None]
                mean, var = _fused_update(
                    mean, var, w_all[:, t], vw_all[:, t], flag
                )
            posts.append((mean, var))
            if t + 1 < T:
                action = Tensor(batch["actions"][:, t])
                a, b, q = self.dynamics_phi(mean, action, rng, dropout_on)
                steps.append((a, b, q))
                mean, var = _fused_predict(mean, var, a, b, q)
        return priors, posts, steps

    def smooth_batch(self, priors, posts, steps):
        """Extended backward pass, elementwise: backward gains, smoothed
        beliefs, and the smoothed dynamics conditional per transition.

        The conditional covariance is strictly positive by construction
        whenever the transition noise is: cvar = (1 - j c) sm_var with
        j c < 1 for positive noise.
        """
        T = len(posts)
        sm_mean, sm_var = posts[T - 1]
        smoothed = [None] * T
        smoothed[T - 1] = (sm_mean, sm_var)
        cond = [None] * max(T - 1, 0)
        for t in range(T - 2, -1, -1):
            p_mean, p_var = posts[t]
            pr_mean, pr_var = priors[t + 1]
            a, _, _ = steps[t]
            mean, var, j_gain, offset, cvar = _fused_smooth_step(
                p_mean, p_var, pr_mean, pr_var, sm_mean, sm_var, a
            )
            cond[t] = (j_gain, offset, cvar)
            sm_mean, sm_var = mean, var
            smoothed[t] = (mean, var)
        return smoothed, cond

    def _recon_loglik(self, batch: dict, z_stack: Tensor) -> Tensor:
        """Sum over valid (sensor, step) pairs of the fixed-variance
        Gaussian log density of observations under decoded samples;
        per-dimension masks zero their terms. ``z_stack`` is (B, T, d)."""
        B, T, d = z_stack.shape
        flat = ad.reshape(z_stack, (B * T, d))
        total = None
        for s in self.config.sensors:
            decoded = self.decoders[s.name](flat)
            obs = batch["obs"][s.name].reshape(B * T, s.obs_dim)
            gate = batch["valid"][s.name].reshape(B * T, 1)
            if s.name in batch["masks"]:
                gate = gate * batch["masks"][s.name].reshape(B * T, s.obs_dim)
            resid = Tensor(obs) - decoded
            terms = -0.5 * (resid * resid + _LOG_2PI) * Tensor(gate)
            term = ad.tsum(terms) * s.decoder_loss_scale
            total = term if total is None else total + term
        return total

    def elbo_terms(self, batch: dict, rng, sample_rng, dropout_on: bool):
        """(recon_total, per-step KL vector of shape (T,)) graph tensors.

        Reconstruction uses one reparameterized sample per smoothed
        marginal; each dynamics KL is evaluated at the sample of its
        earlier state (single-sample Monte Carlo for both expectations).
        The t=0 entry is the exact KL against the learned initial state.
        Everything is per-sequence (already divided by the batch size).
        """
        priors, posts, steps = self.filter_batch(batch, rng, dropout_on)
        smoothed, cond = self.smooth_batch(priors, posts, steps)
        B = smoothed[0][0].shape[0]
        T = len(smoothed)
        # one reparameterized sample per smoothed marginal, drawn from the
        # stacked moments: (T, B, d)
        sm_mean = ad.stack([s[0] for s in smoothed], axis=0)
        sm_var = ad.stack([s[1] for s in smoothed], axis=0)
        eps = Tensor(sample_rng.standard_normal(sm_mean.shape))
        z = sm_mean + ad.sqrt(sm_var) * eps
        recon = self._recon_loglik(batch, ad.transpose_axes(z, (1, 0, 2)))

        mean0, var0 = smoothed[0]
        init_var = ad.softplus(self.init_rho) + 0.0
        kl0 = 0.5 * ad.tsum(
            ad.log(init_var) - ad.log(var0)
            + (var0 + mean0 * mean0) / init_var - 1.0
        )
        # dynamics KLs for every transition at once on (T-1, B, d) stacks
        j_s = ad.stack([c[0] for c in cond], axis=0)
        off_s = ad.stack([c[1] for c in cond], axis=0)
        cvar_s = ad.stack([c[2] for c in cond], axis=0)
        a_s = ad.stack([s[0] for s in steps], axis=0)
        b_s = ad.stack([s[1] for s in steps], axis=0)
        q_s = ad.stack([s[2] for s in steps], axis=0)
        z_prev = z[:-1]
        diff = (j_s * z_prev + off_s) - (a_s * z_prev + b_s)
        kl_terms = 0.5 * (
            ad.log(q_s) - ad.log(cvar_s) + (cvar_s + diff * diff) / q_s - 1.0
        )
        per_step = ad.tsum(kl_terms, axis=(1, 2)) * (1.0 / B)
        kl_vec = ad.concat([ad.reshape(kl0 * (1.0 / B), (1,)), per_step], axis=0)
        return recon * (1.0 / B), kl_vec

    def loss(self, batch: dict, rng, sample_rng, dropout_on: bool = True):
        """Negative bound with the free-nats substitution on each
        batch-mean per-step KL; reported KL stays unclipped."""
        recon, kl_vec = self.elbo_terms(batch, rng, sample_rng, dropout_on)
        fn = self.config.free_nats
        kl_loss = ad.tsum(ad.maximum(kl_vec, fn) if fn > 0 else kl_vec)
        kl_report = float(np.sum(kl_vec.data))
        loss = kl_loss - recon
        return loss, {
            "recon": float(recon.data),
            "kl": kl_report,
            "kl_clipped": float(kl_loss.data),
            "elbo": float(recon.data) - kl_report,
        }

    # evaluation -------------------------------------------------------

    def filter_online(self, trajs: list[Trajectory], dropout_mode: str = "off",
                      rng=None) -> dict:
        """Posterior belief stream without smoothing (numpy arrays).

        ``dropout_mode`` "off" gives the deterministic filter used for
        control; "sampled" draws one dropout realization from ``rng``.
        """
        if dropout_mode not in ("off", "sampled"):
            raise ValueError(f"unknown dropout_mode {dropout_mode!r}")
        dropout_on = dropout_mode == "sampled"
        if dropout_on and rng is None:
            raise ValueError("sampled dropout mode needs an rng")
        batch = stack_batch(trajs)
        with no_grad():
            priors, posts, _ = self.filter_batch(batch, rng, dropout_on)
        return {
            "prior_mean": np.stack([p[0].data for p in priors], axis=1),
            "prior_var": np.stack([p[1].data for p in priors], axis=1),
            "post_mean": np.stack([p[0].data for p in posts], axis=1),
            "post_var": np.stack([p[1].data for p in posts], axis=1),
        }

    def smooth_offline(self, trajs: list[Trajectory]) -> dict:
        batch = stack_batch(trajs)
        with no_grad():
            priors, posts, steps = self.filter_batch(batch, None, False)
            smoothed, _ = self.smooth_batch(priors, posts, steps)
        return {
            "mean": np.stack([s[0].data for s in smoothed], axis=1),
            "var": np.stack([s[1].data for s in smoothed], axis=1),
            "post_mean": np.stack([p[0].data for p in posts], axis=1),
            "post_var": np.stack([p[1].data for p in posts], axis=1),
        }

    def eval_elbo(self, trajs: list[Trajectory], seed: int = 0) -> float:
        """Held-out bound value per step (nats), dropout off, fixed
        sampling seed so curves are comparable across calls."""
        batch = stack_batch(trajs)
        sample_rng = make_rng(seed, "eval-sample")
        with no_grad():
            recon, kl_vec = self.elbo_terms(batch, None, sample_rng, False)
            total = float(recon.data) - float(np.sum(kl_vec.data))
        T = batch["actions"].shape[1]
        return total / T


def epistemic_spread(model: Vrkn, trajs: list[Trajectory], passes: int = 30,
                     seed: int = 0) -> float:
    """Mean across-pass variance of the one-step prediction means under
    sampled dropout; strictly positive whenever dropout is active."""
    means = []
    for k in range(passes):
        rng = make_rng(seed, "mc-dropout", k)
        out = model.filter_online(trajs, dropout_mode="sampled", rng=rng)
        means.append(out["prior_mean"])
    stacked = np.stack(means)  # (passes, n, T, d)
    return float(np.mean(np.var(stacked, axis=0)))


class Trainer:
    """Adam training loop with checkpoint/resume that reproduces an
    uninterrupted run bit for bit (parameters, moments, and all RNG
    streams are saved)."""

    def __init__(self, model: Vrkn, trajs: list[Trajectory], lr: float = 1e-3,
                 clip_norm: float = 1000.0, batch_size: int = 32,
                 seq_len: int | None = None, seed: int = 0):
        self.model = model
        self.data = stack_batch(trajs)
        self.lr = lr
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.seed = seed
        self.opt = Adam(model.parameters(), lr=lr, clip_norm=clip_norm)
        self.batch_rng = make_rng(seed, "train-batch")
        self.dropout_rng = make_rng(seed, "train-dropout")
        self.sample_rng = make_rng(seed, "train-sample")
        self.step = 0

    def _next_batch(self) -> dict:
        n = self.data["actions"].shape[0]
        T = self.data["actions"].shape[1]
        idx = self.batch_rng.integers(0, n, size=self.batch_size)
        if self.seq_len is not None and self.seq_len < T:
            t0 = int(self.batch_rng.integers(0, T - self.seq_len + 1))
            return _slice_batch(self.data, idx, t0, t0 + self.seq_len)
        return _slice_batch(self.data, idx, 0, T)

    def train_step(self) -> dict:
        batch = self._next_batch()
        loss, stats = self.model.loss(
            batch, self.dropout_rng, self.sample_rng, dropout_on=True
        )
        if not np.isfinite(loss.data):
            raise NumericalError(
                f"non-finite loss at step {self.step}: "
                + " ".join(f"{k}={v:.4g}" for k, v in stats.items())
            )
        loss.backward()
        self.opt.step()
        self.opt.zero_grad()
        self.step += 1
        stats["loss"] = float(loss.data)
        stats["step"] = self.step
        return stats

    def run(self, n_steps: int, eval_trajs=None, eval_every: int = 500,
            log=None) -> list[dict]:
        history = []
        for _ in range(n_steps):
            stats = self.train_step()
            if eval_trajs is not None and self.step % eval_every == 0:
                stats["eval_elbo_per_step"] = self.model.eval_elbo(eval_trajs)
            if log is not None and self.step % eval_every == 0:
                log(stats)
            history.append(stats)
        return history

    # checkpointing ----------------------------------------------------

    def save(self, path) -> None:
        payload = {
            "format": "vrkn-checkpoint-v1",
            "config": json.loads(self.model.config.to_json()),
            "train": {
                "lr": self.lr, "clip_norm": self.clip_norm,
                "batch_size": self.batch_size, "seq_len": self.seq_len,
                "seed": self.seed, "step": self.step,
            },
            "params": {
                p.name: {"shape": list(p.data.shape), "data": p.data.ravel().tolist()}
                for p in self.model.parameters()
            },
            "adam": self.opt.state_dict(),
            "rng": {
                "batch": self.batch_rng.bit_generator.state,
                "dropout": self.dropout_rng.bit_generator.state,
                "sample": self.sample_rng.bit_generator.state,
            },
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path, trajs: list[Trajectory]) -> "Trainer":
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("format") != "vrkn-checkpoint-v1":
            raise ValueError("not a vrkn checkpoint")
        config = VrknConfig.from_json(json.dumps(payload["config"]))
        model = Vrkn(config, seed=0)
        params = {p.name: p for p in model.parameters()}
        if set(params) != set(payload["params"]):
            raise ValueError("checkpoint parameters do not match the model")
        for name, entry in payload["params"].items():
            params[name].data = np.asarray(
                entry["data"], dtype=np.float64
            ).reshape(entry["shape"])
        tr = payload["train"]
        trainer = cls(model, trajs, lr=tr["lr"], clip_norm=tr["clip_norm"],
                      batch_size=tr["batch_size"], seq_len=tr["seq_len"],
                      seed=tr["seed"])
        trainer.step = tr["step"]
        trainer.opt.load_state_dict(payload["adam"])
        trainer.batch_rng.bit_generator.state = payload["rng"]["batch"]
        trainer.dropout_rng.bit_generator.state = payload["rng"]["dropout"]
        trainer.sample_rng.bit_generator.state = payload["rng"]["sample"]
        return trainer


def load_model(path) -> Vrkn:
    """Model-only load from a checkpoint (no training state needed)."""
    with open(path) as fh:
        payload = json.load(fh)
    config = VrknConfig.from_json(json.dumps(payload["config"]))
    model = Vrkn(config, seed=0)
    params = {p.name: p for p in model.parameters()}
    for name, entry in payload["params"].items():
        params[name].data = np.asarray(
            entry["data"], dtype=np.float64
        ).reshape(entry["shape"])
    return model
