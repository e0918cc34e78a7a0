"""Synthetic desk-scale data generators.

Two systems: a 4-D linear tracking model with actions (diagonal and
non-diagonal transition variants) and a pendulum integrated with a
semi-implicit Euler scheme, observed through angle features and an
angular-velocity channel. Generators support action-execution noise,
per-sensor rate divisors, randomized missing-observation schedules, and
per-dimension occlusion masks.

Datasets serialize to an ``.npz`` container with one array block per
sensor plus flags, actions, states, and an embedded JSON header holding
the generating TaskSpec.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import make_rng
from .lgssm import LgssmParams, Trajectory

__all__ = [
    "SensorSpec",
    "TaskSpec",
    "generate",
    "linear_tracking_params",
    "pendulum_energy",
    "save_dataset",
    "load_dataset",
]

LINEAR_A = np.array([
    [1.0, 0.0, 0.2, 0.0],
    [0.0, 1.0, 0.0, 0.2],
    [-0.2, 0.0, 0.95, 0.0],
    [0.0, -0.2, 0.0, 0.95],
])
LINEAR_A_DIAG = np.array([0.9, 0.9, 0.8, 0.8])
LINEAR_ACT = np.array([
    [0.0, 0.0],
    [0.0, 0.0],
    [0.15, 0.0],
    [0.0, 0.15],
])
LINEAR_TRANS_VAR = 0.01
LINEAR_OBS_VAR = 0.02

PENDULUM_G_OVER_L = 9.81
PENDULUM_DT = 0.05
PENDULUM_OBS_VAR = 0.01

# slice of the state each linear-tracking sensor observes
_LINEAR_SENSOR_SLICES = {
    "state": slice(0, 4),
    "position": slice(0, 2),
    "velocity": slice(2, 4),
}


@dataclass(frozen=True)
class SensorSpec:
    """One observation channel: valid every ``rate`` steps; sensors with
    ``scheduled`` set additionally follow the task's missing schedule."""

    name: str
    rate: int = 1
    scheduled: bool = False

    def __post_init__(self):
        if self.rate < 1:
            raise ValueError("sensor rate must be >= 1")


@dataclass(frozen=True)
class TaskSpec:
    system: str  # "linear_tracking" | "pendulum"
    action_noise_sd: float = 0.0
    missing: str = "none"  # "none" | "every_nth" | "fixed_mask"
    n_lo: int = 4
    n_hi: int = 8
    mask_prob: float = 0.5
    sensors: tuple[SensorSpec, ...] = ()
    diagonal: bool = False  # linear_tracking transition variant
    seed: int = 0

    def __post_init__(self):
        if self.system not in ("linear_tracking", "pendulum"):
            raise ValueError(f"unknown system {self.system!r}")
        if self.missing not in ("none", "every_nth", "fixed_mask"):
            raise ValueError(f"unknown missing schedule {self.missing!r}")
        if self.action_noise_sd < 0 or not np.isfinite(self.action_noise_sd):
            raise ValueError("action_noise_sd must be finite and >= 0")
        if not (1 <= self.n_lo <= self.n_hi):
            raise ValueError("need 1 <= n_lo <= n_hi")
        sensors = tuple(
            s if isinstance(s, SensorSpec) else SensorSpec(**s)
            for s in (self.sensors or self._default_sensors())
        )
        object.__setattr__(self, "sensors", sensors)
        names = [s.name for s in sensors]
        if len(set(names)) != len(names):
            raise ValueError("sensor names must be unique")
        for s in sensors:
            if s.name not in self._sensor_dims():
                raise ValueError(f"system {self.system!r} has no sensor {s.name!r}")

    def _default_sensors(self) -> tuple[SensorSpec, ...]:
        if self.system == "linear_tracking":
            return (SensorSpec("state", rate=1, scheduled=True),)
        return (
            SensorSpec("angle", rate=1, scheduled=True),
            SensorSpec("velocity", rate=1),
        )

    def _sensor_dims(self) -> dict[str, int]:
        if self.system == "linear_tracking":
            return {"state": 4, "position": 2, "velocity": 2}
        return {"angle": 2, "velocity": 1}

    def sensor_dims(self) -> dict[str, int]:
        return {s.name: self._sensor_dims()[s.name] for s in self.sensors}

    @property
    def action_dim(self) -> int:
        return 2 if self.system == "linear_tracking" else 1

    @property
    def state_dim(self) -> int:
        return 4 if self.system == "linear_tracking" else 2

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TaskSpec":
        raw = json.loads(text)
        raw["sensors"] = tuple(SensorSpec(**s) for s in raw.get("sensors", ()))
        return cls(**raw)


def linear_tracking_params(diagonal: bool = False) -> LgssmParams:
    """The linear-tracking ground truth as an explicit LGSSM (full-state
    sensor); exact inference on this model is the matched baseline."""
    mat = LINEAR_A_DIAG if diagonal else LINEAR_A
    return LgssmParams(
        trans_mat=mat,
        trans_offset=np.zeros(4),
        trans_var=np.full(4, LINEAR_TRANS_VAR),
        obs_var=np.full(4, LINEAR_OBS_VAR),
        init_mean=np.zeros(4),
        init_var=np.ones(4),
        act_mat=LINEAR_ACT,
    )


def pendulum_energy(state: np.ndarray) -> float:
    """Mechanical energy (unit mass/length): 0.5 w^2 - (g/l) cos(theta)."""
    theta, omega = state[..., 0], state[..., 1]
    return 0.5 * omega**2 - PENDULUM_G_OVER_L * np.cos(theta)


def _pendulum_step(state: np.ndarray, u: float) -> np.ndarray:
    # Semi-implicit Euler: update the velocity first, then the angle with
    # the new velocity. Symplectic, so energy error stays bounded.
    theta, omega = state
    omega = omega + PENDULUM_DT * (-PENDULUM_G_OVER_L * np.sin(theta) + u)
    theta = theta + PENDULUM_DT * omega
    return np.array([theta, omega])


def _policy_actions(policy: str, rng, T: int, dim: int) -> np.ndarray:
    if policy == "random":
        return rng.uniform(-1.0, 1.0, size=(T, dim))
    if policy == "sinusoid":
        period = rng.uniform(12.0, 30.0, size=dim)
        phase = rng.uniform(0.0, 2 * np.pi, size=dim)
        t = np.arange(T)[:, None]
        return np.sin(2 * np.pi * t / period + phase)
    raise ValueError(f"unknown policy {policy!r}")


def _observe_linear(state: np.ndarray, name: str, rng) -> np.ndarray:
    sl = _LINEAR_SENSOR_SLICES[name]
    return state[sl] + rng.normal(0.0, np.sqrt(LINEAR_OBS_VAR), state[sl].shape)


def _observe_pendulum(state: np.ndarray, name: str, rng) -> np.ndarray:
    theta, omega = state
    if name == "angle":
        clean = np.array([np.sin(theta), np.cos(theta)])
    else:
        clean = np.array([omega])
    return clean + rng.normal(0.0, np.sqrt(PENDULUM_OBS_VAR), clean.shape)


def _generate_one(task: TaskSpec, seq_index: int, T: int, policy: str) -> Trajectory:
    rng = make_rng(task.seed, "gen", seq_index)
    dims = task.sensor_dims()
    actions = _policy_actions(policy, rng, T, task.action_dim)
    noise = rng.normal(0.0, task.action_noise_sd, size=actions.shape) \
        if task.action_noise_sd > 0 else np.zeros_like(actions)

    if task.system == "linear_tracking":
        A = np.diag(LINEAR_A_DIAG) if task.diagonal else LINEAR_A
        state = rng.normal(0.0, 1.0, size=4)
    else:
        state = np.array([rng.uniform(-np.pi, np.pi), 0.5 * rng.normal()])

    # validity schedule: rate divisor, plus per-sequence n for scheduled
    # sensors when the every_nth schedule is active
    n_gap = int(rng.integers(task.n_lo, task.n_hi + 1))
    valid = {}
    for s in task.sensors:
        flags = (np.arange(T) % s.rate) == 0
        if task.missing == "every_nth" and s.scheduled:
            flags = flags & ((np.arange(T) % n_gap) == 0)
        valid[s.name] = flags

    masks = {}
    if task.missing == "fixed_mask":
        for s in task.sensors:
            if s.scheduled:
                masks[s.name] = rng.random((T, dims[s.name])) >= task.mask_prob

    sensors = {s.name: np.zeros((T, dims[s.name])) for s in task.sensors}
    states = np.zeros((T, task.state_dim))
    for t in range(T):
        states[t] = state
        for s in task.sensors:
            if not valid[s.name][t]:
                continue  # invalid steps keep the zero default value
            if task.system == "linear_tracking":
                sensors[s.name][t] = _observe_linear(state, s.name, rng)
            else:
                sensors[s.name][t] = _observe_pendulum(state, s.name, rng)
        if t + 1 < T:
            executed = actions[t] + noise[t]
            if task.system == "linear_tracking":
                state = (
                    A @ state
                    + LINEAR_ACT @ executed
                    + rng.normal(0.0, np.sqrt(LINEAR_TRANS_VAR), size=4)
                )
            else:
                state = _pendulum_step(state, executed[0])
    return Trajectory(
        sensors=sensors, valid=valid, actions=actions, states=states, masks=masks
    )


def generate(task: TaskSpec, n_seq: int, length: int,
             policy: str = "random") -> list[Trajectory]:
    """Simulate ``n_seq`` trajectories of ``length`` steps.

    Commanded actions are recorded; execution perturbs them with
    N(0, action_noise_sd^2) before stepping the system, so the noise is
    aleatoric from the model's point of view. Schedules depend only on
    the seed, never on observation values.
    """
    return [_generate_one(task, i, length, policy) for i in range(n_seq)]


def save_dataset(path, trajectories: list[Trajectory], task: TaskSpec) -> None:
    """Columnar .npz: stacked per-sensor arrays plus a JSON spec header."""
    arrays = {"spec_json": np.array(task.to_json())}
    names = list(trajectories[0].sensors)
    for name in names:
        arrays[f"obs_{name}"] = np.stack([t.sensors[name] for t in trajectories])
        arrays[f"valid_{name}"] = np.stack([t.valid[name] for t in trajectories])
        if name in trajectories[0].masks:
            arrays[f"mask_{name}"] = np.stack([t.masks[name] for t in trajectories])
    arrays["actions"] = np.stack([t.actions for t in trajectories])
    arrays["states"] = np.stack([t.states for t in trajectories])
    np.savez_compressed(path, **arrays)


def load_dataset(path) -> tuple[list[Trajectory], TaskSpec]:
    with np.load(path, allow_pickle=False) as data:
        task = TaskSpec.from_json(str(data["spec_json"]))
        names = [s.name for s in task.sensors]
        n = data["actions"].shape[0]
        out = []
        for i in range(n):
            masks = {
                name: data[f"mask_{name}"][i]
                for name in names
                if f"mask_{name}" in data
            }
            out.append(Trajectory(
                sensors={name: data[f"obs_{name}"][i] for name in names},
                valid={name: data[f"valid_{name}"][i] for name in names},
                actions=data["actions"][i],
                states=data["states"][i],
                masks=masks,
            ))
    return out, task
