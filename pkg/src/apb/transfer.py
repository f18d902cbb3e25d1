"""Cross-task policy transport on tabular MDPs and the coverage bound on adaptation error.

The transport construction takes two tasks sharing a transition kernel and
builds a state map ``A`` with ``A V1 = V2`` and an action map
``B = pivot1 pivot2^T / |pivot2|^2`` (pivot = ``gamma P V + r``), so that
``(A Pi1 B) pivot2 = V2``.  Gridworlds related by a square symmetry give the
permutation case, where the transported policy can be read off state by state.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (BoundViolation, DegenerateInputError, ExtractionError, NoSolutionError,
                     PreconditionError, StructuralError)
from .tabular import TabularMDP, greedy_actions, solve_optimal_policy

VALUE_MATCH_TOL = 1e-9
SNAP_TOL = 1e-9


@dataclass(frozen=True)
class SolvedTask:
    mdp: TabularMDP
    pi: object
    values: np.ndarray

    @property
    def pivot(self):
        return self.mdp.pivot(self.values)


def solve_task(mdp, tol=1e-12):
    pi, v = solve_optimal_policy(mdp, tol=tol)
    return SolvedTask(mdp, pi, v)


@dataclass(frozen=True)
class TransportPair:
    state_map: np.ndarray
    action_map: np.ndarray

    def transport(self, pi1):
        """``A Pi1 B`` for a policy matrix (or raw array) of task 1."""
        data = getattr(pi1, "data", pi1)
        return self.state_map @ data @ self.action_map


def _check_shared_dynamics(task1, task2):
    m1, m2 = task1.mdp, task2.mdp
    if (m1.n_states, m1.n_actions) != (m2.n_states, m2.n_actions):
        raise PreconditionError("tasks have different state/action spaces")
    if m1.discount != m2.discount or not np.array_equal(m1.transition, m2.transition):
        raise PreconditionError("transport requires a shared transition kernel and discount")


def lemma2_transport(task1, task2, state_map, shared_dynamics=True):
    """Build ``(A, B)`` carrying task 1's policy matrix onto task 2's value vector.

    Each pivot is taken from its own task. With ``shared_dynamics=False`` the
    kernels may differ (gridworlds whose absorbing goals sit in different
    cells); the value-consistency identity only needs each task's own pivot.
    """
    if shared_dynamics:
        _check_shared_dynamics(task1, task2)
    elif (task1.mdp.n_states, task1.mdp.n_actions) != (task2.mdp.n_states, task2.mdp.n_actions):
        raise PreconditionError("tasks have different state/action spaces")
    A = np.asarray(state_map, dtype=float)
    S = task1.mdp.n_states
    if A.shape != (S, S):
        raise StructuralError(f"state map must be {(S, S)}, got {A.shape}")
    gap = float(np.max(np.abs(A @ task1.values - task2.values)))
    if gap > VALUE_MATCH_TOL:
        raise PreconditionError(f"state map violates A V1 = V2 (max gap {gap:.3e})")
    p1, p2 = task1.pivot, task2.pivot
    norm_sq = float(p2 @ p2)
    if np.sqrt(norm_sq) <= 1e-12:
        raise DegenerateInputError("task 2 pivot vector is zero")
    return TransportPair(state_map=A, action_map=np.outer(p1, p2) / norm_sq)


def value_consistency_gap(pair, task1, task2):
    """``max |(A Pi1 B) pivot2 - V2|``."""
    return float(np.max(np.abs(pair.transport(task1.pi) @ task2.pivot - task2.values)))


def row_block_stochasticity_gap(matrix, n_actions):
    """How far a matrix is from being a policy matrix (diagnostic only)."""
    M = np.asarray(matrix, dtype=float)
    S = M.shape[0]
    worst = 0.0
    for s in range(S):
        block = M[s, s * n_actions:(s + 1) * n_actions]
        off = np.abs(np.delete(M[s], np.s_[s * n_actions:(s + 1) * n_actions]))
        worst = max(worst, abs(block.sum() - 1.0), float(off.max(initial=0.0)),
                    float(-block.min(initial=0.0)))
    return worst


def _match_permutation(v1, v2, adjacency):
    n = len(v1)
    candidates = [np.flatnonzero(np.abs(v1 - v2[i]) <= VALUE_MATCH_TOL) for i in range(n)]
    order = sorted(range(n), key=lambda i: len(candidates[i]))
    adj1, adj2 = adjacency
    assign = {}
    used = set()

    def consistent(i, k):
        return all(adj2[i, j] == adj1[k, l] and adj2[j, i] == adj1[l, k] for j, l in assign.items())

    def search(pos):
        if pos == n:
            return True
        i = order[pos]
        for k in candidates[i]:
            k = int(k)
            if k in used or not consistent(i, k) or adj2[i, i] != adj1[k, k]:
                continue
            assign[i] = k
            used.add(k)
            if search(pos + 1):
                return True
            del assign[i]
            used.discard(k)
        return False

    if not search(0):
        raise NoSolutionError("no adjacency-preserving permutation matches the value vectors")
    return assign


def build_state_map(v1, v2, mode="permutation", adjacency=None):
    """A matrix ``A`` with ``A v1 = v2``.

    ``permutation`` pairs states with equal values (stable order, or an
    adjacency-preserving matching when ``adjacency=(adj1, adj2)`` is given);
    ``rank-one`` returns ``v2 v1^T / |v1|^2``; ``least-squares`` returns the
    matrix closest to the identity in Frobenius norm.
    """
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    if v1.shape != v2.shape or v1.ndim != 1:
        raise StructuralError("value vectors must be 1-D and of equal length")
    n = v1.size
    if mode == "permutation":
        if np.max(np.abs(np.sort(v1) - np.sort(v2))) > VALUE_MATCH_TOL:
            raise NoSolutionError("value multisets differ; no permutation maps v1 onto v2")
        A = np.zeros((n, n))
        if adjacency is None:
            o1 = np.argsort(v1, kind="stable")
            o2 = np.argsort(v2, kind="stable")
            A[o2, o1] = 1.0
        else:
            for i, k in _match_permutation(v1, v2, adjacency).items():
                A[i, k] = 1.0
    elif mode in ("rank-one", "least-squares"):
        norm_sq = float(v1 @ v1)
        if norm_sq == 0.0:
            raise DegenerateInputError("v1 is zero; no linear map sends it to v2")
        if mode == "rank-one":
            A = np.outer(v2, v1) / norm_sq
        else:
            A = np.eye(n) + np.outer(v2 - v1, v1) / norm_sq
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if np.max(np.abs(A @ v1 - v2)) > VALUE_MATCH_TOL:
        raise NoSolutionError("constructed state map misses A v1 = v2")
    return A


def occupied_blocks(image, n_actions, tol=1e-9):
    image = np.asarray(image, dtype=float)
    blocks = image.reshape(-1, n_actions)
    return np.flatnonzero(np.abs(blocks).max(axis=1) > tol)


def extract_policy(image, n_actions, state=None, tol=1e-9):
    """Read ``pi(.|s)`` back out of an extended row image ``s Pi``.

    The image must be supported on a single state block (``state`` if given);
    the block is renormalized to sum to one.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 1 or image.size % n_actions:
        raise StructuralError("row image length must be a multiple of |A|")
    blocks = occupied_blocks(image, n_actions, tol)
    if state is None:
        if len(blocks) != 1:
            raise ExtractionError(f"image occupies {len(blocks)} state blocks, expected one")
        state = int(blocks[0])
    elif np.any(blocks != state):
        raise ExtractionError(f"image has mass outside state block {state}")
    block = image[state * n_actions:(state + 1) * n_actions]
    mass = block.sum()
    if mass <= 0:
        raise ExtractionError(f"state block {state} has nonpositive mass {mass}")
    return block / mass


# ---------------------------------------------------------------------------
# gridworlds

UP, DOWN, LEFT, RIGHT = range(4)
MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])

# the dihedral group of the square as 2x2 matrices on (row, col) offsets
SQUARE_SYMMETRIES = {
    "identity": ((1, 0), (0, 1)),
    "rot90": ((0, 1), (-1, 0)),
    "rot180": ((-1, 0), (0, -1)),
    "rot270": ((0, -1), (1, 0)),
    "flip_rows": ((-1, 0), (0, 1)),
    "flip_cols": ((1, 0), (0, -1)),
    "transpose": ((0, 1), (1, 0)),
    "antitranspose": ((0, -1), (-1, 0)),
}


@dataclass(frozen=True)
class GridworldTask:
    """Four-action gridworld; bumping a wall leaves the agent in place, the goal absorbs.

    ``permutation[s]`` (when present) is the state of this task that
    corresponds to state ``s`` of the reference task it was derived from;
    ``action_permutation`` relabels the moves the same way.
    """
    width: int
    height: int
    goal: tuple
    step_reward: float = -1.0
    goal_reward: float = 0.0
    discount: float = 0.9
    permutation: np.ndarray | None = field(default=None, compare=False)
    action_permutation: np.ndarray | None = field(default=None, compare=False)
    reference: "GridworldTask | None" = field(default=None, compare=False, repr=False)

    @property
    def n_states(self):
        return self.width * self.height

    def index(self, cell):
        r, c = cell
        return r * self.width + c

    def cell(self, s):
        return divmod(int(s), self.width)

    @property
    def goal_index(self):
        return self.index(self.goal)

    def next_state(self, s, a):
        if s == self.goal_index:
            return s
        r, c = self.cell(s)
        dr, dc = MOVES[a]
        nr, nc = r + dr, c + dc
        if 0 <= nr < self.height and 0 <= nc < self.width:
            return self.index((nr, nc))
        return s

    def to_mdp(self):
        S, A = self.n_states, 4
        P = np.zeros((S * A, S))
        r = np.full(S * A, float(self.step_reward))
        for s in range(S):
            for a in range(A):
                P[s * A + a, self.next_state(s, a)] = 1.0
        g = self.goal_index
        r[g * A:(g + 1) * A] = self.goal_reward
        return TabularMDP(S, A, P, r, self.discount)

    def adjacency(self):
        """0/1 matrix of one-step reachability between distinct states."""
        S = self.n_states
        adj = np.zeros((S, S), dtype=int)
        for s in range(S):
            for a in range(4):
                t = self.next_state(s, a)
                if t != s:
                    adj[s, t] = 1
        return adj

    def transformed(self, symmetry):
        """The task obtained by applying a square symmetry to this grid (goal included)."""
        M = np.array(SQUARE_SYMMETRIES[symmetry] if isinstance(symmetry, str) else symmetry)
        off_diag = M[0, 1] != 0
        if off_diag and self.width != self.height:
            raise StructuralError(f"symmetry {symmetry!r} needs a square grid")
        new_h, new_w = (self.width, self.height) if off_diag else (self.height, self.width)
        centre = np.array([(self.height - 1) / 2, (self.width - 1) / 2])
        new_centre = np.array([(new_h - 1) / 2, (new_w - 1) / 2])

        def map_cell(cell):
            x = M @ (np.array(cell, dtype=float) - centre) + new_centre
            return tuple(int(round(v)) for v in x)

        perm = np.array([map_cell(self.cell(s)) for s in range(self.n_states)])
        perm = perm[:, 0] * new_w + perm[:, 1]
        act = np.array([int(np.flatnonzero((MOVES == M @ MOVES[a]).all(axis=1))[0]) for a in range(4)])
        return GridworldTask(new_w, new_h, map_cell(self.goal), self.step_reward, self.goal_reward,
                             self.discount, permutation=perm, action_permutation=act, reference=self)

    def check_permutation(self):
        """True when relabeling the reference task reproduces this task exactly."""
        if self.permutation is None or self.reference is None:
            raise PreconditionError("task has no reference permutation")
        ref, perm, act = self.reference, self.permutation, self.action_permutation
        P1, P2 = ref.to_mdp(), self.to_mdp()
        A = 4
        for s in range(ref.n_states):
            for a in range(A):
                k1, k2 = s * A + a, perm[s] * A + act[a]
                if not np.array_equal(P2.transition[k2][perm], P1.transition[k1]):
                    return False
                if P2.reward[k2] != P1.reward[k1]:
                    return False
        return True

    def permutation_matrix(self):
        """``A`` with ``A V_ref = V_self``: ``A[perm[s], s] = 1``."""
        if self.permutation is None:
            raise PreconditionError("task has no permutation")
        S = self.n_states
        A = np.zeros((S, S))
        A[self.permutation, np.arange(S)] = 1.0
        return A


def greedy_rollout_reaches_goal(task, actions, start):
    s = start
    for _ in range(task.n_states + 1):
        if s == task.goal_index:
            return True
        s = task.next_state(s, int(actions[s]))
    return s == task.goal_index


@dataclass
class Theorem1Report:
    identity_deviation: float
    value_consistency: float
    greedy_agreement: float
    goal_reached: bool
    transported_actions: np.ndarray
    stochasticity_gap: float
    tolerance: float = 1e-8

    @property
    def max_deviation(self):
        return max(self.identity_deviation, self.value_consistency)

    @property
    def passed(self):
        return (self.max_deviation <= self.tolerance and self.greedy_agreement == 1.0
                and self.goal_reached)


def verify_theorem1(reference, permuted, tol=1e-12):
    """Check the permutation transport between two symmetric gridworlds state by state.

    For task-2 state ``i`` with ``g(i) = k`` (the reference state mapped onto
    ``i``), the ``i``-th block of row ``i`` of ``A Pi1 B`` must equal the
    linear image ``pi1(.|k) B_ki`` where ``B_ki`` is the ``(k, i)`` block of
    ``B``.  That image is ``V(k) * Q2(i, .) / |pivot2|^2``; dividing out the
    row's value-consistency factor gives the per-state linear map ``h`` whose
    greedy action is compared with the independently solved task-2 policy.
    """
    if permuted.permutation is None:
        raise PreconditionError("permuted task carries no permutation")
    t1 = solve_task(reference.to_mdp(), tol)
    t2 = solve_task(permuted.to_mdp(), tol)
    A = permuted.permutation_matrix()
    pair = lemma2_transport(t1, t2, A, shared_dynamics=False)
    transported = pair.transport(t1.pi)
    nA = t1.mdp.n_actions
    S = t1.mdp.n_states
    B = pair.action_map
    norm_sq = float(t2.pivot @ t2.pivot)
    q2 = t2.mdp.q_values(t2.values)
    pi1 = t1.pi.table()
    g = np.argmax(A, axis=1)

    deviation = 0.0
    actions = np.zeros(S, dtype=int)
    agree = 0
    for i in range(S):
        k = int(g[i])
        image = transported[i, i * nA:(i + 1) * nA]
        B_ki = B[k * nA:(k + 1) * nA, i * nA:(i + 1) * nA]
        deviation = max(deviation, float(np.max(np.abs(image - pi1[k] @ B_ki))))
        scale = float(transported[i] @ t2.pivot) / norm_sq
        optimal = np.flatnonzero(q2[i] >= q2[i].max() - 1e-9)
        if abs(scale) <= 1e-12:
            # V2(i) = 0: the image is zero and every action is optimal (absorbing goal)
            actions[i] = int(optimal[0])
        else:
            preference = image / scale
            actions[i] = int(greedy_actions(preference[None, :], tie_tol=1e-9)[0])
        agree += actions[i] in optimal
    reached = all(greedy_rollout_reaches_goal(permuted, actions, s) for s in range(S))
    return Theorem1Report(
        identity_deviation=deviation,
        value_consistency=value_consistency_gap(pair, t1, t2),
        greedy_agreement=agree / S,
        goal_reached=reached,
        transported_actions=actions,
        stochasticity_gap=row_block_stochasticity_gap(transported, nA),
    )


# ---------------------------------------------------------------------------
# adaptation error under partial coverage


@dataclass(frozen=True)
class BoundReport:
    lipschitz_L: float
    head_op_norm: float
    ood_count: int
    eps_max: float
    bound_value: float
    empirical_error: float

    @property
    def holds(self):
        return self.empirical_error <= self.bound_value + 1e-12


def _as_points(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def coverage_terms(test_inputs, support, snap_tol=SNAP_TOL):
    """``(ood_mask, distance to support)`` for every test input."""
    X = _as_points(test_inputs)
    G = _as_points(support)
    dist = np.sqrt(((X[:, None, :] - G[None, :, :]) ** 2).sum(axis=-1)).min(axis=1)
    return dist > snap_tol, dist


def adaptation_bound(f_meta, f_star, head, test_inputs, support, lipschitz_L, check=True):
    """Evaluate the summed head-mapped backbone discrepancy and its coverage bound.

    ``f_meta`` and ``f_star`` map an ``(n, d)`` array of inputs to ``(n, m)``
    features; ``head`` is an ``(k, m)`` matrix.
    """
    X = _as_points(test_inputs)
    G = _as_points(support)
    H = np.atleast_2d(np.asarray(head, dtype=float))
    gap = np.abs(np.asarray(f_meta(G)) - np.asarray(f_star(G)))
    if gap.size and gap.max() > 1e-9:
        raise PreconditionError(f"backbones disagree on the support (max gap {gap.max():.3e})")
    ood, dist = coverage_terms(X, G)
    diff = (np.asarray(f_star(X)) - np.asarray(f_meta(X))).reshape(len(X), -1)
    empirical = float(np.linalg.norm(diff @ H.T, axis=1).sum())
    op = float(np.linalg.norm(H, 2))
    n_ood = int(ood.sum())
    eps_max = float(dist[ood].max()) if n_ood else 0.0
    report = BoundReport(float(lipschitz_L), op, n_ood, eps_max,
                         2.0 * float(lipschitz_L) * op * n_ood * eps_max, empirical)
    if check and not report.holds:
        raise BoundViolation(f"empirical error {empirical} exceeds bound {report.bound_value}")
    return report


@dataclass(frozen=True)
class PiecewiseLinear:
    """Vector-valued piecewise-linear map on the real line, linear beyond its end knots."""
    knots: np.ndarray
    values: np.ndarray  # (n_knots, m)
    left_slope: np.ndarray
    right_slope: np.ndarray

    def __call__(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        out = np.stack([np.interp(x, self.knots, self.values[:, j]) for j in range(self.values.shape[1])], axis=1)
        lo, hi = self.knots[0], self.knots[-1]
        left, right = x < lo, x > hi
        out[left] = self.values[0] + np.outer(x[left] - lo, self.left_slope)
        out[right] = self.values[-1] + np.outer(x[right] - hi, self.right_slope)
        return out

    def lipschitz(self):
        slopes = np.diff(self.values, axis=0) / np.diff(self.knots)[:, None]
        norms = np.linalg.norm(np.vstack([slopes, self.left_slope, self.right_slope]), axis=1)
        return float(norms.max())


def _random_unit_ball(rng, n, m):
    v = rng.normal(size=(n, m))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(0, 1, size=(n, 1))


def random_lipschitz_pair(rng, support, n_knots=12, out_dim=2, domain=(-5.0, 5.0)):
    """``(f_star, f_meta)``: two 1-Lipschitz piecewise-linear maps agreeing on ``support``.

    ``f_meta`` interpolates ``f_star`` between the support points and leaves
    the support hull with its own random slopes.
    """
    support = np.unique(np.asarray(support, dtype=float).reshape(-1))
    knots = np.sort(rng.uniform(*domain, size=n_knots))
    slopes = _random_unit_ball(rng, n_knots + 1, out_dim)
    values = np.zeros((n_knots, out_dim))
    values[0] = rng.normal(size=out_dim)
    for i in range(1, n_knots):
        values[i] = values[i - 1] + slopes[i] * (knots[i] - knots[i - 1])
    f_star = PiecewiseLinear(knots, values, slopes[0], slopes[-1])
    ends = _random_unit_ball(rng, 2, out_dim)
    f_meta = PiecewiseLinear(support, f_star(support), ends[0], ends[1])
    return f_star, f_meta
