"""Finite MDPs in matrix form.

Conventions used throughout the package:

* state-action pairs are flattened as ``k = s * n_actions + a``;
* ``transition`` has shape ``(S*A, S)`` and row ``k`` is ``P(. | s, a)``;
* ``reward`` has length ``S*A``;
* a policy matrix ``Pi`` has shape ``(S, S*A)`` with row ``s`` holding
  ``pi(. | s)`` inside the column block ``[s*A, (s+1)*A)`` and zeros elsewhere,
  so that ``Pi @ transition`` is the induced state chain and ``Pi @ reward``
  the induced expected reward.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import DegenerateInputError, NumericError, StructuralError

ROW_SUM_TOL = 1e-12


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TabularMDP:
    n_states: int
    n_actions: int
    transition: np.ndarray
    reward: np.ndarray
    discount: float
    r_min: float | None = None
    r_max: float | None = None

    def __post_init__(self):
        S, A = int(self.n_states), int(self.n_actions)
        if S < 1 or A < 1:
            raise StructuralError(f"need positive sizes, got |S|={S}, |A|={A}")
        P = _frozen(self.transition)
        r = _frozen(self.reward).reshape(-1)
        if P.shape != (S * A, S):
            raise StructuralError(f"transition must be {(S * A, S)}, got {P.shape}")
        if r.shape != (S * A,):
            raise StructuralError(f"reward must have length {S * A}, got {r.shape[0]}")
        if not (0.0 < self.discount < 1.0):
            raise StructuralError(f"discount must lie in (0, 1), got {self.discount}")
        if not np.all(np.isfinite(P)) or not np.all(np.isfinite(r)):
            raise StructuralError("transition and reward must be finite")
        for k in range(S * A):
            row = P[k]
            if np.any(row < 0):
                raise StructuralError(
                    f"transition row {k} (state {k // A}, action {k % A}) has negative entries")
            total = row.sum()
            if abs(total - 1.0) > ROW_SUM_TOL:
                raise StructuralError(
                    f"transition row {k} (state {k // A}, action {k % A}) sums to {float(total)!r}, not 1")
        r_min = float(r.min()) if self.r_min is None else float(self.r_min)
        r_max = float(r.max()) if self.r_max is None else float(self.r_max)
        if r.min() < r_min or r.max() > r_max:
            raise StructuralError(f"reward entries outside declared range [{r_min}, {r_max}]")
        object.__setattr__(self, "n_states", S)
        object.__setattr__(self, "n_actions", A)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "discount", float(self.discount))
        object.__setattr__(self, "r_min", r_min)
        object.__setattr__(self, "r_max", r_max)

    def index(self, s, a):
        return s * self.n_actions + a

    def q_values(self, values):
        """``r + gamma * P V`` as an ``(S, A)`` table."""
        return self.pivot(values).reshape(self.n_states, self.n_actions)

    def pivot(self, values):
        """The state-action vector ``gamma * P V + r``."""
        return self.discount * (self.transition @ np.asarray(values, dtype=float)) + self.reward

    def with_reward(self, reward):
        return TabularMDP(self.n_states, self.n_actions, self.transition, reward, self.discount)


@dataclass(frozen=True)
class PolicyMatrix:
    data: np.ndarray
    n_actions: int

    def __post_init__(self):
        data = _frozen(self.data)
        A = int(self.n_actions)
        if data.ndim != 2 or data.shape[1] != data.shape[0] * A:
            raise StructuralError(f"policy matrix must be S x S*A, got {data.shape} with |A|={A}")
        S = data.shape[0]
        for s in range(S):
            lo, hi = s * A, (s + 1) * A
            outside = np.concatenate([data[s, :lo], data[s, hi:]])
            if np.any(outside != 0):
                raise StructuralError(f"row {s} has mass outside its state block")
            block = data[s, lo:hi]
            if np.any(block < 0) or abs(block.sum() - 1.0) > ROW_SUM_TOL:
                raise StructuralError(f"row {s} is not a distribution over actions")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "n_actions", A)

    @property
    def n_states(self):
        return self.data.shape[0]

    def table(self):
        """Per-state action distributions, shape ``(S, A)``."""
        S, A = self.n_states, self.n_actions
        return np.stack([self.data[s, s * A:(s + 1) * A] for s in range(S)])

    def induced_transition(self, mdp):
        return self.data @ mdp.transition

    def induced_reward(self, mdp):
        return self.data @ mdp.reward

    def greedy_actions(self):
        return np.argmax(self.table(), axis=1)


@dataclass(frozen=True)
class PolicyDecomposition:
    rank_one: np.ndarray
    null_part: np.ndarray
    pivot: np.ndarray

    def reconstruct(self):
        return self.rank_one + self.null_part


def policy_matrix(mdp, policy):
    """Build the block policy matrix from an ``(S, A)`` table of action distributions."""
    table = np.asarray(policy, dtype=float)
    S, A = mdp.n_states, mdp.n_actions
    if table.shape != (S, A):
        raise StructuralError(f"policy table must be {(S, A)}, got {table.shape}")
    if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > ROW_SUM_TOL):
        raise StructuralError("each policy row must be a probability distribution")
    data = np.zeros((S, S * A))
    for s in range(S):
        data[s, s * A:(s + 1) * A] = table[s]
    return PolicyMatrix(data, A)


def deterministic_policy(mdp, actions):
    table = np.zeros((mdp.n_states, mdp.n_actions))
    table[np.arange(mdp.n_states), np.asarray(actions, dtype=int)] = 1.0
    return policy_matrix(mdp, table)


def state_values(mdp, pi):
    """Solve ``(I - gamma Pi P) V = Pi r`` with a partial-pivot LU factorization."""
    if pi.data.shape != (mdp.n_states, mdp.n_states * mdp.n_actions):
        raise StructuralError("policy matrix does not match the MDP")
    S = mdp.n_states
    lhs = np.eye(S) - mdp.discount * pi.induced_transition(mdp)
    rhs = pi.induced_reward(mdp)
    try:
        lu, piv = scipy.linalg.lu_factor(lhs, check_finite=True)
        values = scipy.linalg.lu_solve((lu, piv), rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"policy evaluation failed: {exc}", residual=float("inf")) from exc
    residual = float(np.max(np.abs(lhs @ values - rhs)))
    scale = max(1.0, float(np.max(np.abs(rhs))) / (1.0 - mdp.discount))
    if not np.all(np.isfinite(values)) or residual > 1e-11 * scale:
        raise NumericError(f"policy evaluation residual {residual:.3e} too large", residual=residual)
    return values


def decompose_policy(mdp, pi, values=None):
    """Split ``Pi`` into the rank-one term ``V pivot^T / |pivot|^2`` and a null part."""
    if values is None:
        values = state_values(mdp, pi)
    pivot = mdp.pivot(values)
    norm_sq = float(pivot @ pivot)
    if np.sqrt(norm_sq) <= 1e-12:
        raise DegenerateInputError("pivot vector gamma*P*V + r is zero; decomposition undefined")
    rank_one = np.outer(values, pivot) / norm_sq
    return PolicyDecomposition(rank_one=rank_one, null_part=pi.data - rank_one, pivot=pivot)


def bellman_optimality_residual(mdp, values):
    q = mdp.q_values(values)
    return float(np.max(np.abs(q.max(axis=1) - values)))


def greedy_actions(q, tie_tol=0.0):
    """Row-wise argmax where near-ties (within ``tie_tol``) go to the lowest action index."""
    q = np.asarray(q, dtype=float)
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - tie_tol, axis=1)


def solve_optimal_policy(mdp, tol=1e-12, max_iter=1_000_000):
    """Value iteration to sup-norm residual ``< tol``, then the greedy policy.

    The returned values are the exact evaluation of the greedy policy, so they
    are consistent with the returned policy matrix to solver precision.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        v_new = mdp.q_values(v).max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    else:
        raise NumericError(f"value iteration did not converge in {max_iter} sweeps")
    actions = greedy_actions(mdp.q_values(v), tie_tol=tol)
    pi = deterministic_policy(mdp, actions)
    return pi, state_values(mdp, pi)


def brute_force_optimal(mdp):
    """Best deterministic policy by exhaustive enumeration (tiny MDPs only)."""
    best_v, best_actions = None, None
    for actions in itertools.product(range(mdp.n_actions), repeat=mdp.n_states):
        v = state_values(mdp, deterministic_policy(mdp, actions))
        if best_v is None or np.all(v >= best_v - 1e-12) and np.any(v > best_v + 1e-12):
            best_v, best_actions = v, actions
    return np.array(best_actions), best_v


def random_mdp(rng, n_states, n_actions, discount=0.9, reward_range=(-1.0, 1.0)):
    P = rng.random((n_states * n_actions, n_states)) + 1e-3
    P /= P.sum(axis=1, keepdims=True)
    r = rng.uniform(*reward_range, size=n_states * n_actions)
    return TabularMDP(n_states, n_actions, P, r, discount, *reward_range)


def random_policy_table(rng, n_states, n_actions):
    table = rng.random((n_states, n_actions)) + 1e-3
    return table / table.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# scenario files


def format_scenario(mdp):
    """Text scenario: ``S A gamma`` header, ``S*A`` transition rows, one reward line."""
    lines = [f"{mdp.n_states} {mdp.n_actions} {mdp.discount!r}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in mdp.transition]
    lines.append(" ".join(repr(float(x)) for x in mdp.reward))
    return "\n".join(lines) + "\n"


def parse_scenario(text):
    rows = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append(line.split())
    if not rows:
        raise StructuralError("empty scenario")
    header = rows[0]
    if len(header) != 3:
        raise StructuralError("scenario header must be '|S| |A| gamma'")
    S, A, gamma = int(header[0]), int(header[1]), float(header[2])
    body = rows[1:]
    if len(body) != S * A + 1:
        raise StructuralError(f"expected {S * A} transition rows and one reward line, got {len(body)} lines")
    for k, row in enumerate(body[:-1]):
        if len(row) != S:
            raise StructuralError(f"transition row {k} has {len(row)} entries, expected {S}")
    P = np.array([[float(x) for x in row] for row in body[:-1]])
    r = np.array([float(x) for x in body[-1]])
    return TabularMDP(S, A, P, r, gamma)


def write_scenario(mdp, path):
    Path(path).write_text(format_scenario(mdp))


def read_scenario(path):
    return parse_scenario(Path(path).read_text())
