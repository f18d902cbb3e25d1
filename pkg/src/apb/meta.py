"""Meta-training a shared backbone, frozen-backbone adaptation, and behaviour cloning.

Meta-training keeps one head/tail pair, one pair of critics and one replay
buffer per training task around a single shared backbone.  Every outer cycle
collects episodes on each task, then interleaves per-task critic and
head/tail steps with a backbone step on the task-averaged actor loss.

Adaptation starts fresh head/tail layers and critics on a new task, keeps
the backbone frozen, and periodically re-draws the head/tail ("reset").  The
TD3 baseline runs the identical loop with nothing frozen and a freshly drawn
backbone, so paired runs consume the same environment and gradient budgets.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .envs import ACTION_DIM, STATE_DIM, PointMassEnv, observe, rollout, rollout_batch, uniform_policy
from .errors import NumericError, StructuralError
from .nn import AdamState, Mlp, adam_step, layer_arrays, save_checkpoint
from .policy import GROUPS, ApbActor
from .td3 import (Explorer, ReplayBuffer, TD3Config, TD3Learner, TwinCritics, actor_loss, apply_actor_grads,
                  critic_step, update_cycle, update_targets)

log = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}


def _streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class ActorSpec:
    width: int = 64
    depth: int = 2
    dtype: str = "float32"

    def build(self, rng, init_scale=1.0, freeze_backbone=False):
        return ApbActor.build(STATE_DIM, ACTION_DIM, rng, width=self.width, depth=self.depth,
                              init_scale=init_scale, freeze_backbone=freeze_backbone,
                              dtype=DTYPES[self.dtype])

    def critics(self, rng, td3):
        return TwinCritics.build(STATE_DIM, ACTION_DIM, rng, td3.critic_width, td3.critic_depth,
                                 td3.critic_lr, DTYPES[self.dtype])


def evaluate(actor, task, rng, n_episodes=5, horizon=None):
    """Mean undiscounted return of the deterministic policy."""
    env = PointMassEnv(task)
    _, _, rewards = rollout_batch(env, actor.act, rng, n_episodes, horizon)
    return float(rewards.sum(axis=1).mean())


# ---------------------------------------------------------------------------
# meta-training


@dataclass
class MetaTrainConfig:
    n_tasks: int = 30
    actor_lr: float = 1e-4
    backbone_lr: float = 1e-4
    critic_lr: float = 1e-2
    n_trajectories: int = 10
    updates_per_cycle: int = 500
    batch_size: int = 128
    warmup_steps: int = 1000
    action_sigma: float = 0.1
    buffer_size: int = 200_000
    init_scale: float = 1e-3
    plateau_window: int = 5
    plateau_patience: int = 20
    plateau_tol: float = 0.01
    max_cycles: int = 200
    eval_episodes: int = 5
    seed: int = 0
    actor: ActorSpec = field(default_factory=ActorSpec)
    td3: TD3Config = field(default_factory=TD3Config)

    def __post_init__(self):
        for name in ("n_tasks", "n_trajectories", "updates_per_cycle", "batch_size", "max_cycles"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("actor_lr", "backbone_lr", "critic_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class MetaTrainResult:
    backbone: Mlp
    actors: list
    tasks: list
    curve: list
    final_returns: list
    cycles: int
    converged: bool
    outcome: str = "completed"

    def checkpoint_arrays(self):
        arrays = layer_arrays("backbone", self.backbone.layers)
        for i, actor in enumerate(self.actors):
            arrays.update(layer_arrays(f"head@{i}", [actor.head]))
            arrays.update(layer_arrays(f"tail@{i}", [actor.tail]))
        return arrays

    def save(self, path, metadata=None):
        meta = {"tasks": [t.to_dict() for t in self.tasks], "cycles": self.cycles,
                "final_returns": self.final_returns, **(metadata or {})}
        return save_checkpoint(path, self.checkpoint_arrays(), meta)


def backbone_gradient(learners, batches):
    """Mean over tasks of the backbone gradient of each task's actor loss."""
    total = None
    losses = []
    for learner, batch in zip(learners, batches):
        loss, grads = actor_loss(batch, learner.actor, learner.critics)
        losses.append(loss)
        g = grads["backbone"]
        total = [x.astype(np.float64) for x in g] if total is None else [t + x for t, x in zip(total, g)]
    n = len(learners)
    return [t / n for t in total], float(np.mean(losses))


class PlateauStopper:
    """Stop once the windowed mean return has not improved by ``tol`` (relative) for ``patience`` cycles."""

    def __init__(self, window, patience, tol):
        self.window, self.patience, self.tol = window, patience, tol
        self.history = []
        self.best = None
        self.since_best = 0

    def update(self, value):
        self.history.append(value)
        if len(self.history) < self.window:
            return False
        m = float(np.mean(self.history[-self.window:]))
        if self.best is None or m > self.best + self.tol * max(abs(self.best), 1e-8):
            self.best = m
            self.since_best = 0
        else:
            self.since_best += 1
        return self.since_best >= self.patience


def meta_train(config, family, tasks=None):
    """Meta-train a backbone over ``config.n_tasks`` tasks of ``family``."""
    from .envs import TaskDistribution, sample_train_tasks

    if tasks is None:
        tasks = sample_train_tasks(TaskDistribution(family), config.n_tasks, config.seed)
    init_rng, data_rng, eval_rng, *task_rngs = _streams(config.seed, 3 + 2 * len(tasks))
    td3 = TD3Config(**{**asdict(config.td3), "actor_lr": config.actor_lr, "critic_lr": config.critic_lr})
    spec = config.actor
    shared = spec.build(init_rng, config.init_scale)
    backbone = shared.backbone
    backbone_optim = AdamState.for_params(backbone.params(), config.backbone_lr)
    learners, buffers, explorers, envs = [], [], [], []
    for i, task in enumerate(tasks):
        actor = spec.build(init_rng, config.init_scale).with_backbone(backbone)
        actor.frozen = frozenset({"backbone"})
        learner = TD3Learner(actor, spec.critics(init_rng, td3), td3, task_rngs[2 * i])
        learners.append(learner)
        buffers.append(ReplayBuffer(config.buffer_size, STATE_DIM, ACTION_DIM))
        explorers.append(Explorer(actor, "action", config.action_sigma, task_rngs[2 * i + 1]))
        envs.append(PointMassEnv(task))
    random_policy = uniform_policy(data_rng)
    stopper = PlateauStopper(config.plateau_window, config.plateau_patience, config.plateau_tol)
    curve = []
    env_steps = grad_steps = 0
    converged = False
    outcome = "completed"
    cycle = 0
    for cycle in range(1, config.max_cycles + 1):
        returns = []
        for i in range(len(tasks)):
            for _ in range(config.n_trajectories):
                if buffers[i].size < config.warmup_steps:
                    policy = random_policy
                else:
                    explorers[i].begin_episode()
                    policy = explorers[i]
                traj = rollout(envs[i], policy, data_rng)
                buffers[i].add_trajectory(traj)
                env_steps += len(traj)
                returns.append(traj.ret)
        try:
            losses = _meta_updates(config, learners, buffers, backbone, backbone_optim)
        except NumericError as exc:
            log.warning("meta-training diverged at cycle %d: %s", cycle, exc)
            outcome = "diverged"
            break
        grad_steps += config.updates_per_cycle
        mean_ret = float(np.mean(returns))
        curve.append({"cycle": cycle, "env_steps": env_steps, "grad_steps": grad_steps,
                      "return": mean_ret, **losses})
        warm = min(b.size for b in buffers) < config.warmup_steps + len(traj)
        if not warm and stopper.update(mean_ret):
            converged = True
            break
    final = [evaluate(l.actor, t, eval_rng, config.eval_episodes) for l, t in zip(learners, tasks)]
    return MetaTrainResult(backbone, [l.actor for l in learners], tasks, curve, final, cycle, converged, outcome)


def _meta_updates(config, learners, buffers, backbone, backbone_optim):
    closses, alosses = [], []
    delay = config.td3.policy_delay
    for u in range(1, config.updates_per_cycle + 1):
        batches = []
        for learner, buf in zip(learners, buffers):
            batch = buf.sample(config.batch_size, learner.rng)
            closses.append(critic_step(learner, batch))
            batches.append(batch)
        if u % delay:
            continue
        for learner, batch in zip(learners, batches):
            loss, grads = actor_loss(batch, learner.actor, learner.critics)
            apply_actor_grads(learner, grads, ("head", "tail"))
            learner.actor_updates += 1
        # backbone losses are recomputed on fresh batches after the head/tail steps
        fresh = [buf.sample(config.batch_size, l.rng) for l, buf in zip(learners, buffers)]
        grad, loss = backbone_gradient(learners, fresh)
        adam_step(backbone_optim, backbone.params(), [g.astype(p.dtype) for g, p in zip(grad, backbone.params())])
        alosses.append(loss)
        for learner in learners:
            # the shared backbone moves through its own optimizer, so its target trails it too
            update_targets(learner, GROUPS)
    return {"critic_loss": float(np.mean(closses)),
            "actor_loss": float(np.mean(alosses)) if alosses else float("nan")}


# ---------------------------------------------------------------------------
# adaptation and the TD3 baseline


@dataclass
class AdaptConfig:
    protocol: str = "parameter"
    sigma: float = 0.005
    reset_every: int = 15
    init_scale: float = 1e-3
    n_trajectories: int = 10
    n_updates: int = 2000
    batch_size: int = 512
    total_episodes: int = 200
    warmup_steps: int = 1000
    buffer_size: int = 200_000
    actor_lr: float = 1e-4
    critic_lr: float = 0.05
    eval_episodes: int = 5
    random_init_backbone: bool = False
    seed: int = 0
    actor: ActorSpec = field(default_factory=ActorSpec)
    td3: TD3Config = field(default_factory=TD3Config)

    def __post_init__(self):
        if self.reset_every < 1:
            raise ValueError("reset_every must be at least 1")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.protocol not in ("action", "parameter"):
            raise ValueError(f"unknown protocol {self.protocol!r}")


@dataclass
class AdaptResult:
    rows: list
    actor: ApbActor
    final_return: float
    env_steps: int
    grad_steps: int
    backbone_checksums: list
    outcome: str = "completed"
    method: str = "apb"

    @property
    def backbone_constant(self):
        return len(set(self.backbone_checksums)) == 1


def _fresh_actor(config, init_rng, backbone_rng, frozen):
    actor = config.actor.build(init_rng, config.init_scale, freeze_backbone=frozen)
    fresh = config.actor.build(backbone_rng).backbone
    for dst, src in zip(actor.backbone.params(), fresh.params()):
        dst[...] = src
    return actor


def _load_backbone(actor, backbone):
    if backbone is None:
        raise StructuralError("adaptation needs a backbone (checkpoint group 'backbone')")
    if hasattr(backbone, "group"):
        actor.load_group(backbone, "backbone")
        return
    src = backbone.params()
    dst = actor.backbone.params()
    if len(src) != len(dst) or any(a.shape != b.shape for a, b in zip(src, dst)):
        raise StructuralError("backbone shapes do not match the actor")
    for d, s in zip(dst, src):
        d[...] = s


def adapt(backbone, task, config):
    """Frozen-backbone adaptation of fresh head/tail layers on ``task``.

    ``backbone`` is a loaded checkpoint (or an ``Mlp``); with
    ``config.random_init_backbone`` a seeded random backbone is used instead.
    """
    return _train_on_task(task, config, "apb-random" if config.random_init_backbone else "apb", backbone)


def run_baseline_td3(task, config):
    """Full-parameter TD3 with the same architecture, schedule and budgets as ``adapt``."""
    return _train_on_task(task, config, "baseline", None)


def _train_on_task(task, config, method, backbone):
    init_rng, backbone_rng, env_rng, explore_rng, learn_rng, reset_rng, eval_rng, warm_rng = _streams(config.seed, 8)
    frozen = method != "baseline"
    actor = _fresh_actor(config, init_rng, backbone_rng, frozen)
    if method == "apb":
        _load_backbone(actor, backbone)
    td3 = TD3Config(**{**asdict(config.td3), "actor_lr": config.actor_lr, "critic_lr": config.critic_lr})
    learner = TD3Learner(actor, config.actor.critics(init_rng, td3), td3, learn_rng)
    buffer = ReplayBuffer(config.buffer_size, STATE_DIM, ACTION_DIM)
    explorer = Explorer(actor, config.protocol, config.sigma, explore_rng)
    env = PointMassEnv(task)
    random_policy = uniform_policy(warm_rng)
    rows = []
    checksums = [actor.checksum("backbone")]
    env_steps = grad_steps = 0
    last = {"actor_loss": float("nan"), "critic_loss": float("nan")}
    outcome = "completed"
    for episode in range(config.total_episodes):
        reset = episode > 0 and episode % config.reset_every == 0
        if reset:
            actor.reset_task_parameters(reset_rng)
            learner.reset_actor_optimizer(("head", "tail"))
            for dst, src in ((learner.target_actor.head, actor.head), (learner.target_actor.tail, actor.tail)):
                dst.weights[...] = src.weights
                dst.bias[...] = src.bias
        if env_steps < config.warmup_steps:
            policy = random_policy
        else:
            explorer.begin_episode()
            policy = explorer
        traj = rollout(env, policy, env_rng)
        buffer.add_trajectory(traj)
        env_steps += len(traj)
        if traj.diverged:
            outcome = "diverged"
        if (episode + 1) % config.n_trajectories == 0 and buffer.size >= config.batch_size:
            try:
                metrics = update_cycle(buffer, learner, config.n_updates, config.batch_size)
            except NumericError as exc:
                log.warning("%s run diverged at episode %d: %s", method, episode, exc)
                outcome = "diverged"
            else:
                grad_steps += config.n_updates
                last = metrics
                checksums.append(actor.checksum("backbone"))
        rows.append({"episode": episode, "env_steps": env_steps, "grad_steps": grad_steps,
                     "return": traj.ret, "actor_loss": last["actor_loss"],
                     "critic_loss": last["critic_loss"], "reset": int(reset)})
        if outcome == "diverged":
            break
    final = evaluate(actor, task, eval_rng, config.eval_episodes) if outcome == "completed" else float("nan")
    return AdaptResult(rows, actor, final, env_steps, grad_steps, checksums, outcome, method)


# ---------------------------------------------------------------------------
# behaviour cloning


@dataclass
class BcDataset:
    states: np.ndarray
    actions: np.ndarray
    horizon: int
    description: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.states) != len(self.actions):
            raise StructuralError("states and actions differ in length")

    def __len__(self):
        return len(self.states)

    def save(self, path):
        """``<path>.npy`` holds ``[states | actions]``; ``<path>.json`` describes it."""
        path = Path(path)
        data = np.concatenate([self.states, self.actions], axis=1)
        np.save(path.with_suffix(".npy"), data)
        side = {"n_pairs": len(self), "state_dim": self.states.shape[1], "action_dim": self.actions.shape[1],
                "horizon": self.horizon, **self.description}
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))
        return path.with_suffix(".npy")

    @classmethod
    def load(cls, path):
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        data = np.load(path.with_suffix(".npy"), allow_pickle=False)
        sd, ad = side.pop("state_dim"), side.pop("action_dim")
        n = side.pop("n_pairs")
        if data.shape != (n, sd + ad):
            raise StructuralError(f"dataset shape {data.shape} disagrees with sidecar ({n}, {sd + ad})")
        horizon = side.pop("horizon")
        return cls(data[:, :sd], data[:, sd:], horizon, side)


def collect_demonstrations(expert, task, n_pairs=100_000, horizon=100, seed=0):
    """Contiguous deterministic expert rollouts of length ``horizon``, stored as the expert's observations."""
    n_episodes = int(np.ceil(n_pairs / horizon))
    env = PointMassEnv(task)
    states, actions, rewards = rollout_batch(env, expert.act, np.random.default_rng(seed), n_episodes, horizon)
    S = observe(task, states.reshape(-1, STATE_DIM)[:n_pairs])
    A = actions.reshape(-1, ACTION_DIM)[:n_pairs]
    return BcDataset(S, A, horizon, {"task": task.to_dict(), "expert_return": float(rewards.sum(axis=1).mean()),
                                     "seed": seed})


@dataclass
class BcResult:
    actor: ApbActor
    losses: list
    backbone_checksums: list = field(default_factory=list)
    order_digest: str = ""

    @property
    def final_loss(self):
        return self.losses[-1]


def bc_train(dataset, mode, lr=1e-3, batch_size=2048, n_steps=1000, seed=0, backbone=None,
             init_scale=1e-3, actor_spec=None):
    """Fit a deterministic policy to expert actions by mean-squared error.

    ``apb-frozen`` trains head/tail around a frozen ``backbone``; ``full-scratch``
    trains every parameter of a randomly initialised actor.  Both draw the
    same minibatch sequence for a given seed.
    """
    if len(dataset) == 0:
        raise StructuralError("empty dataset")
    spec = actor_spec or ActorSpec()
    init_rng, backbone_rng, order_rng = _streams(seed, 3)
    if mode == "apb-frozen":
        actor = spec.build(init_rng, init_scale, freeze_backbone=True)
        _load_backbone(actor, backbone)
    elif mode == "full-scratch":
        actor = spec.build(init_rng, init_scale)
        fresh = spec.build(backbone_rng).backbone
        for d, s in zip(actor.backbone.params(), fresh.params()):
            d[...] = s
    else:
        raise ValueError(f"unknown mode {mode!r}")
    optim = {g: AdamState.for_params(p, lr) for g, p in actor.groups().items()}
    S = dataset.states.astype(actor.dtype)
    A = dataset.actions.astype(actor.dtype)
    n = len(S)
    b = min(batch_size, n)
    losses = []
    checks = [actor.checksum("backbone")]
    perm = order_rng.permutation(n)
    pos = 0
    order = hashlib.sha256()
    for _ in range(n_steps):
        if pos + b > n:
            perm = order_rng.permutation(n)
            pos = 0
        idx = perm[pos:pos + b]
        pos += b
        order.update(idx.tobytes())
        pred, tape = actor.forward(S[idx])
        err = pred - A[idx]
        losses.append(float((err * err).sum(axis=1).mean()))
        grads, _ = actor.backward(tape, (2.0 / b) * err)
        groups = actor.groups()
        for g in actor.trainable_groups():
            adam_step(optim[g], groups[g], grads[g])
    checks.append(actor.checksum("backbone"))
    return BcResult(actor, losses, checks, order.hexdigest())


@dataclass
class EvalSummary:
    mean: float
    ci_low: float
    ci_high: float
    returns: list

    @property
    def half_width(self):
        return (self.ci_high - self.ci_low) / 2


def mean_ci(values, confidence=0.95):
    x = np.asarray(values, dtype=float)
    m = float(x.mean())
    if len(x) < 2:
        return EvalSummary(m, m, m, x.tolist())
    h = float(stats.t.ppf(0.5 + confidence / 2, len(x) - 1) * x.std(ddof=1) / np.sqrt(len(x)))
    return EvalSummary(m, m - h, m + h, x.tolist())


def bc_eval(actor, task, h_eval=300, h_demo=100, n_seeds=10, seed=0):
    """Deterministic returns at horizon ``h_eval`` over ``n_seeds`` start states, with a 95% CI."""
    if not h_eval > h_demo:
        raise ValueError(f"evaluation horizon {h_eval} must exceed the demonstration horizon {h_demo}")
    env = PointMassEnv(task, horizon=h_eval)
    _, _, rewards = rollout_batch(env, actor.act, np.random.default_rng(seed), n_seeds, h_eval)
    return mean_ci(rewards.sum(axis=1))


def train_expert(task, config, eval_every=10, eval_episodes=5):
    """Full TD3 on ``task``; returns the best evaluated snapshot and its return.

    The snapshot is a (near-)expert when its return is within 10% of the run's
    best evaluation return, which holds for the best snapshot by construction.
    """
    init_rng, backbone_rng, env_rng, explore_rng, learn_rng, reset_rng, eval_rng, warm_rng = _streams(config.seed, 8)
    actor = _fresh_actor(config, init_rng, backbone_rng, frozen=False)
    td3 = TD3Config(**{**asdict(config.td3), "actor_lr": config.actor_lr, "critic_lr": config.critic_lr})
    learner = TD3Learner(actor, config.actor.critics(init_rng, td3), td3, learn_rng)
    buffer = ReplayBuffer(config.buffer_size, STATE_DIM, ACTION_DIM)
    explorer = Explorer(actor, config.protocol, config.sigma, explore_rng)
    env = PointMassEnv(task)
    random_policy = uniform_policy(warm_rng)
    best, best_actor, env_steps = -np.inf, actor.copy(), 0
    for episode in range(config.total_episodes):
        if env_steps < config.warmup_steps:
            policy = random_policy
        else:
            explorer.begin_episode()
            policy = explorer
        traj = rollout(env, policy, env_rng)
        buffer.add_trajectory(traj)
        env_steps += len(traj)
        if (episode + 1) % config.n_trajectories == 0 and buffer.size >= config.batch_size:
            update_cycle(buffer, learner, config.n_updates, config.batch_size)
        if (episode + 1) % eval_every == 0 and env_steps >= config.warmup_steps:
            ret = evaluate(actor, task, eval_rng, eval_episodes)
            if ret > best:
                best, best_actor = ret, actor.copy()
    return best_actor, float(best)
