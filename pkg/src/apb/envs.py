"""Point-mass task families standing in for the locomotion benchmarks.

A 2-D point mass with state ``(p_x, p_y, v_x, v_y)`` is driven by a bounded
force.  The families mirror the benchmark split into reward variation
(velocity targets, goals, directions) and dynamics variation (mass and
damping scaled by ``1.5**alpha`` and ``1.3**alpha``).  The task parameter is
never part of the observation.

The agent observes the full state only on goal-plane.  The other families
reward velocity alone, so their observation masks the (unbounded) position
with zeros, the way locomotion benchmarks leave the root position out.

All functions accept batches: states are ``(..., 4)`` and actions ``(..., 2)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

FAMILIES = ("vel-line", "vel-to-dir", "goal-plane", "dir-plane", "dyn-rand")
STATE_DIM = 4
ACTION_DIM = 2
CONTROL_COST = 0.01
DT = 0.05
HORIZON = 100
MASS = 0.1
DAMPING = 2.0
GOAL_RADIUS = 3.0

# meta-training supports (the sampled parameter)
TRAIN_SUPPORT = {
    "vel-line": (0.0, 3.0),
    "vel-to-dir": (0.0, 3.0),
    "goal-plane": (0.0, np.pi),
    "dir-plane": (0.0, np.pi),
    "dyn-rand": (-3.0, 2.1),
}


@dataclass(frozen=True)
class TaskSpec:
    """One task.  ``parameter`` is a target velocity (vel-line, vel-to-dir
    training tasks), an angle (goal-plane, dir-plane), a unit direction
    2-vector (the vel-to-dir test task) or a dynamics exponent (dyn-rand)."""
    family: str
    parameter: float | tuple
    is_ood: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        p = self.parameter
        p = tuple(float(x) for x in p) if np.ndim(p) else float(p)
        object.__setattr__(self, "parameter", p)
        if not self.is_ood and not in_train_support(self.family, p):
            raise ValueError(f"{self.family} parameter {p} outside the training support")

    @property
    def goal(self):
        th = self.parameter
        return np.array([GOAL_RADIUS * np.cos(th), GOAL_RADIUS * np.sin(th)])

    @property
    def direction(self):
        if isinstance(self.parameter, tuple):
            d = np.array(self.parameter)
            return d / np.linalg.norm(d)
        return np.array([np.cos(self.parameter), np.sin(self.parameter)])

    @property
    def mass(self):
        return MASS * 1.5 ** self.parameter if self.family == "dyn-rand" else MASS

    @property
    def damping(self):
        return DAMPING * 1.3 ** self.parameter if self.family == "dyn-rand" else DAMPING

    def to_dict(self):
        return {"family": self.family, "parameter": self.parameter, "is_ood": self.is_ood}

    @classmethod
    def from_dict(cls, d):
        p = d["parameter"]
        return cls(d["family"], tuple(p) if isinstance(p, (list, tuple)) else p, bool(d.get("is_ood", False)))


def in_train_support(family, parameter):
    if isinstance(parameter, tuple):
        return False
    lo, hi = TRAIN_SUPPORT[family]
    return lo <= parameter <= hi


@dataclass(frozen=True)
class TaskDistribution:
    family: str
    seed: int = 0

    @property
    def support(self):
        return TRAIN_SUPPORT[self.family]

    def sample(self, n, seed=None):
        return sample_train_tasks(self, n, self.seed if seed is None else seed)


def sample_train_tasks(dist, n, seed):
    """``n`` i.i.d. training tasks from the family's uniform support."""
    if n < 1:
        raise ValueError("n must be at least 1")
    lo, hi = dist.support
    params = np.random.default_rng(seed).uniform(lo, hi, size=n)
    return [TaskSpec(dist.family, float(p)) for p in params]


def ood_task(family):
    param = {
        "vel-line": -2.0,
        "vel-to-dir": (-1.0, 0.0),
        "goal-plane": 1.5 * np.pi,
        "dir-plane": 1.5 * np.pi,
        "dyn-rand": 2.4,
    }[family]
    return TaskSpec(family, param, is_ood=True)


POSITION_FAMILIES = ("goal-plane",)


def observe(task, state):
    """Policy input for ``state``: position zeroed unless the family's reward depends on it."""
    state = np.asarray(state, dtype=float)
    if task.family in POSITION_FAMILIES:
        return state
    obs = state.copy()
    obs[..., :2] = 0.0
    return obs


def reward(task, state, action):
    """Reward for arriving in ``state`` after applying ``action``."""
    state = np.asarray(state, dtype=float)
    action = np.asarray(action, dtype=float)
    p, v = state[..., :2], state[..., 2:]
    cost = CONTROL_COST * (action * action).sum(axis=-1)
    fam = task.family
    if fam == "vel-line" or (fam == "vel-to-dir" and not isinstance(task.parameter, tuple)):
        return -np.abs(v[..., 0] - task.parameter) - cost
    if fam == "goal-plane":
        return -np.linalg.norm(p - task.goal, axis=-1) - cost
    if fam in ("dir-plane", "vel-to-dir"):
        return v @ task.direction - cost
    return v[..., 0] - cost


class PointMassEnv:
    def __init__(self, task, horizon=HORIZON, dt=DT, init_noise=0.05):
        self.task = task
        self.horizon = int(horizon)
        self.dt = dt
        self.mass = task.mass
        self.damping = task.damping
        self.init_noise = init_noise

    def reset(self, rng, n=None):
        shape = (STATE_DIM,) if n is None else (n, STATE_DIM)
        s = np.zeros(shape)
        if self.init_noise:
            s[..., :2] = rng.uniform(-self.init_noise, self.init_noise, size=s[..., :2].shape)
        return s

    def dynamics(self, state, action):
        state = np.asarray(state, dtype=float)
        a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        v = (1 - self.damping * self.dt) * state[..., 2:] + (self.dt / self.mass) * a
        p = state[..., :2] + self.dt * v
        return np.concatenate([p, v], axis=-1), a

    def step(self, state, action):
        nxt, a = self.dynamics(state, action)
        if not np.all(np.isfinite(nxt)):
            raise NumericError("point mass state became non-finite")
        return nxt, reward(self.task, nxt, a), a


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    diverged: bool = False
    dones: np.ndarray = field(default=None)
    observations: np.ndarray = field(default=None)
    next_observations: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.dones is None:
            self.dones = np.zeros(len(self.rewards), dtype=bool)
        if self.observations is None:
            self.observations = self.states
        if self.next_observations is None:
            self.next_observations = self.next_states

    @property
    def ret(self):
        return float(self.rewards.sum())

    def __len__(self):
        return len(self.rewards)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "p_x", "p_y", "v_x", "v_y", "a_x", "a_y", "r"])
            for t in range(len(self)):
                w.writerow([t, *map(repr, map(float, self.states[t])), *map(repr, map(float, self.actions[t])),
                            repr(float(self.rewards[t]))])


def rollout(env, policy, rng, horizon=None):
    """Run one episode; ``policy(observation) -> action``.

    A non-finite state ends the episode early with ``diverged`` set.
    """
    H = env.horizon if horizon is None else int(horizon)
    if H < 1:
        raise ValueError("horizon must be at least 1")
    s = env.reset(rng)
    S, A, R, S2 = [], [], [], []
    diverged = False
    for _ in range(H):
        a = np.asarray(policy(observe(env.task, s)), dtype=float)
        try:
            s2, r, a = env.step(s, a)
        except NumericError:
            diverged = True
            break
        S.append(s)
        A.append(a)
        R.append(r)
        S2.append(s2)
        s = s2
    S = np.array(S) if S else np.zeros((0, STATE_DIM))
    S2 = np.array(S2) if S2 else np.zeros((0, STATE_DIM))
    return Trajectory(S, np.array(A) if A else np.zeros((0, ACTION_DIM)), np.array(R, dtype=float), S2, diverged,
                      observations=observe(env.task, S), next_observations=observe(env.task, S2))


def rollout_batch(env, policy, rng, n, horizon=None):
    """``n`` episodes in lock-step with a batched policy of the observations.

    Returns arrays ``states (n, H, 4)``, ``actions (n, H, 2)``, ``rewards (n, H)``.
    """
    H = env.horizon if horizon is None else int(horizon)
    s = env.reset(rng, n)
    states = np.zeros((n, H, STATE_DIM))
    actions = np.zeros((n, H, ACTION_DIM))
    rewards = np.zeros((n, H))
    for t in range(H):
        a = np.asarray(policy(observe(env.task, s)), dtype=float)
        s2, r, a = env.step(s, a)
        states[:, t], actions[:, t], rewards[:, t] = s, a, r
        s = s2
    return states, actions, rewards


def zero_policy(state):
    return np.zeros(np.shape(state)[:-1] + (ACTION_DIM,))


def uniform_policy(rng):
    return lambda state: rng.uniform(-1.0, 1.0, size=np.shape(state)[:-1] + (ACTION_DIM,))
