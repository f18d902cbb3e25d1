"""Twin-critic deterministic actor-critic (TD3) over the three-group actor.

Only unfrozen actor groups receive optimizer steps; frozen groups still get
gradients computed, which is what the meta-training backbone step relies on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError
from .nn import AdamState, Mlp, adam_step, soft_update
from .policy import GROUPS


@dataclass
class TD3Config:
    gamma: float = 0.9
    tau: float = 0.005
    policy_delay: int = 2
    smoothing_sigma: float = 0.2
    smoothing_clip: float = 0.5
    actor_lr: float = 1e-4
    critic_lr: float = 0.05
    critic_width: int = 64
    critic_depth: int = 2


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return len(self.rewards)


class ReplayBuffer:
    """Ring buffer with uniform sampling; storage grows on demand up to ``capacity``."""

    def __init__(self, capacity, state_dim, action_dim, dtype=np.float32):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.dtype = dtype
        self._alloc = 0
        self._arrays = None
        self._next = 0
        self.size = 0
        self._grow(min(self.capacity, 1024))

    def _grow(self, n):
        new = {
            "states": np.zeros((n, self.state_dim), self.dtype),
            "actions": np.zeros((n, self.action_dim), self.dtype),
            "rewards": np.zeros(n, self.dtype),
            "next_states": np.zeros((n, self.state_dim), self.dtype),
            "dones": np.zeros(n, self.dtype),
        }
        if self._arrays is not None:
            for k, a in self._arrays.items():
                new[k][: self._alloc] = a
        self._arrays = new
        self._alloc = n

    def add(self, state, action, reward, next_state, done=False):
        if not np.isfinite(reward):
            raise ValueError("reward must be finite")
        if np.shape(state) != (self.state_dim,) or np.shape(action) != (self.action_dim,):
            raise StructuralError("transition dimensions do not match the buffer")
        if self._next >= self._alloc and self._alloc < self.capacity:
            self._grow(min(self.capacity, 2 * self._alloc))
        i = self._next
        a = self._arrays
        a["states"][i] = state
        a["actions"][i] = action
        a["rewards"][i] = reward
        a["next_states"][i] = next_state
        a["dones"][i] = float(done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def add_trajectory(self, traj):
        """Store a trajectory's observation transitions."""
        n = len(traj)
        if n == 0:
            return
        if not np.all(np.isfinite(traj.rewards)):
            raise ValueError("reward must be finite")
        if n > self.capacity:
            raise StructuralError("trajectory longer than the buffer capacity")
        while self._alloc < self.capacity and self._alloc < min(self.capacity, self._next + n):
            self._grow(min(self.capacity, 2 * self._alloc))
        idx = (self._next + np.arange(n)) % self.capacity
        a = self._arrays
        a["states"][idx] = traj.observations
        a["actions"][idx] = traj.actions
        a["rewards"][idx] = traj.rewards
        a["next_states"][idx] = traj.next_observations
        a["dones"][idx] = traj.dones
        self._next = int((self._next + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)

    def sample_indices(self, batch_size, rng):
        if self.size == 0:
            raise StructuralError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size, rng):
        idx = self.sample_indices(batch_size, rng)
        a = self._arrays
        return Batch(a["states"][idx], a["actions"][idx], a["rewards"][idx], a["next_states"][idx], a["dones"][idx])

    def __len__(self):
        return self.size


class TwinCritics:
    def __init__(self, q1, q2, lr=1e-3):
        self.q1, self.q2 = q1, q2
        self.target_q1, self.target_q2 = q1.copy(), q2.copy()
        self.optim1 = AdamState.for_params(q1.params(), lr)
        self.optim2 = AdamState.for_params(q2.params(), lr)

    @classmethod
    def build(cls, state_dim, action_dim, rng, width=64, depth=2, lr=1e-3, dtype=np.float64):
        sizes = [state_dim + action_dim] + [width] * depth + [1]
        return cls(Mlp.build(sizes, rng, "relu", dtype=dtype), Mlp.build(sizes, rng, "relu", dtype=dtype), lr)

    def params(self):
        return self.q1.params() + self.q2.params()

    def target_params(self):
        return self.target_q1.params() + self.target_q2.params()


class TD3Learner:
    """Actor, target actor, twin critics and optimizer state for one task."""

    def __init__(self, actor, critics, config=None, rng=None):
        self.config = config or TD3Config()
        self.actor = actor
        self.target_actor = actor.copy()
        self.critics = critics
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.actor_optim = {g: AdamState.for_params(p, self.config.actor_lr) for g, p in actor.groups().items()}
        self.critic_updates = 0
        self.actor_updates = 0

    def reset_actor_optimizer(self, groups=("head", "tail")):
        for g in groups:
            self.actor_optim[g].reset()


def _q_input(states, actions):
    return np.concatenate([states, actions], axis=1)


def td_targets(batch, critics, target_actor, config, rng):
    """``r + gamma (1 - done) min(Q1', Q2')(s', clip(pi'(s') + clipped noise))``."""
    a_next = target_actor.act(batch.next_states)
    bound = target_actor.action_bound
    noise = np.clip(rng.normal(0.0, config.smoothing_sigma * bound, size=a_next.shape),
                    -config.smoothing_clip * bound, config.smoothing_clip * bound)
    a_next = np.clip(a_next + noise, -bound, bound).astype(a_next.dtype)
    x = _q_input(batch.next_states.astype(a_next.dtype), a_next)
    q_next = np.minimum(critics.target_q1(x), critics.target_q2(x))[:, 0]
    return batch.rewards + config.gamma * (1.0 - batch.dones) * q_next


def critic_loss(batch, critics, target_actor, config, rng, targets=None):
    """Summed mean-squared TD errors of both critics and their gradients."""
    if len(batch) == 0:
        raise StructuralError("empty batch")
    y = td_targets(batch, critics, target_actor, config, rng) if targets is None else targets
    x = _q_input(batch.states, batch.actions)
    q1, t1 = critics.q1.forward(x)
    q2, t2 = critics.q2.forward(x)
    n = len(batch)
    e1 = q1[:, 0] - y
    e2 = q2[:, 0] - y
    loss = float(np.mean(e1 * e1) + np.mean(e2 * e2))
    g1, _ = critics.q1.backward(t1, (2.0 / n) * e1[:, None])
    g2, _ = critics.q2.backward(t2, (2.0 / n) * e2[:, None])
    return loss, g1, g2


def actor_loss(batch, actor, critics):
    """``-mean Q1(s, pi(s))`` and gradients for every actor group."""
    if len(batch) == 0:
        raise StructuralError("empty batch")
    a, atape = actor.forward(batch.states)
    x = _q_input(batch.states.astype(a.dtype), a)
    q, qtape = critics.q1.forward(x)
    n = len(batch)
    _, gx = critics.q1.backward(qtape, np.full_like(q, -1.0 / n))
    grads, _ = actor.backward(atape, gx[:, actor.state_dim:])
    return float(-q.mean()), grads


def apply_actor_grads(learner, grads, groups=None):
    groups = learner.actor.trainable_groups() if groups is None else groups
    params = learner.actor.groups()
    for g in groups:
        if g in learner.actor.frozen:
            continue
        adam_step(learner.actor_optim[g], params[g], grads[g])


def update_targets(learner, groups=None):
    """Polyak-average target actor groups (default: the unfrozen ones) and both target critics."""
    tau = learner.config.tau
    # frozen groups never move, so their targets are left byte-identical
    online, target = learner.actor.groups(), learner.target_actor.groups()
    for g in learner.actor.trainable_groups() if groups is None else groups:
        soft_update(target[g], online[g], tau)
    soft_update(learner.critics.target_params(), learner.critics.params(), tau)


def critic_step(learner, batch):
    loss, g1, g2 = critic_loss(batch, learner.critics, learner.target_actor, learner.config, learner.rng)
    adam_step(learner.critics.optim1, learner.critics.q1.params(), g1)
    adam_step(learner.critics.optim2, learner.critics.q2.params(), g2)
    learner.critic_updates += 1
    return loss


def _flat(params):
    return np.concatenate([p.ravel().astype(np.float64) for p in params])


def update_cycle(buffer, learner, n_updates, batch_size, actor_step=None):
    """``n_updates`` critic steps; every ``policy_delay``-th also updates the actor and targets.

    ``actor_step(learner, batch)`` may replace the default actor update (meta-training
    uses this hook to interleave the shared-backbone step).
    """
    if buffer.size < batch_size:
        raise StructuralError(f"buffer holds {buffer.size} transitions, batch needs {batch_size}")
    before_actor = _flat(learner.actor.params())
    before_critic = _flat(learner.critics.params())
    closses, alosses = [], []
    for _ in range(n_updates):
        batch = buffer.sample(batch_size, learner.rng)
        closses.append(critic_step(learner, batch))
        if learner.critic_updates % learner.config.policy_delay == 0:
            if actor_step is None:
                loss, grads = actor_loss(batch, learner.actor, learner.critics)
                apply_actor_grads(learner, grads)
            else:
                loss = actor_step(learner, batch)
            alosses.append(loss)
            learner.actor_updates += 1
            update_targets(learner)
    return {
        "critic_loss": float(np.mean(closses)) if closses else float("nan"),
        "actor_loss": float(np.mean(alosses)) if alosses else float("nan"),
        "actor_updates": len(alosses),
        "actor_change": float(np.linalg.norm(_flat(learner.actor.params()) - before_actor)),
        "critic_change": float(np.linalg.norm(_flat(learner.critics.params()) - before_critic)),
    }


class Explorer:
    """Behaviour policy for data collection.

    ``action`` noise adds clipped Gaussian noise to every action; ``parameter``
    noise acts with a perturbed copy of the actor drawn at ``begin_episode`` and
    held for the whole episode.
    """

    def __init__(self, actor, protocol, sigma, rng):
        if protocol not in ("action", "parameter"):
            raise ValueError(f"unknown exploration protocol {protocol!r}")
        if sigma < 0:
            raise ValueError("sigma must be nonnegative")
        self.actor = actor
        self.protocol = protocol
        self.sigma = float(sigma)
        self.rng = rng
        self.episode_actor = actor

    def begin_episode(self):
        if self.protocol == "parameter":
            self.episode_actor = self.actor.perturb_parameters(self.sigma, self.rng)
        else:
            self.episode_actor = self.actor
        return self.episode_actor

    def __call__(self, state):
        a = self.episode_actor.act(state).astype(np.float64)
        if self.protocol == "action" and self.sigma > 0:
            bound = self.actor.action_bound
            a = np.clip(a + self.rng.normal(0.0, self.sigma * bound, size=a.shape), -bound, bound)
        return a


def explore(actor, state, protocol, sigma, rng, episode_actor=None):
    """One exploratory action; for parameter noise pass the episode's perturbed actor."""
    if protocol == "parameter":
        policy = episode_actor if episode_actor is not None else actor.perturb_parameters(sigma, rng)
        return policy.act(state)
    ex = Explorer(actor, protocol, sigma, rng)
    ex.begin_episode()
    return ex(state)


__all__ = ["TD3Config", "Batch", "ReplayBuffer", "TwinCritics", "TD3Learner", "critic_loss",
           "actor_loss", "update_cycle", "Explorer", "explore", "td_targets", "GROUPS"]
