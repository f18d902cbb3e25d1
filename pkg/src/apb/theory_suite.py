"""The exact tabular checks behind ``apb verify-theory``.

Every check yields one record ``{"check", "instance", "max_deviation",
"tolerance", "passed", ...}``; the suite passes iff every record does.
"""
from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .tabular import (decompose_policy, policy_matrix, random_mdp, random_policy_table, read_scenario,
                      solve_optimal_policy, state_values)
from .transfer import (SQUARE_SYMMETRIES, GridworldTask, adaptation_bound, build_state_map, coverage_terms,
                       lemma2_transport, random_lipschitz_pair, solve_task, value_consistency_gap,
                       verify_theorem1)

DECOMPOSITION_TOL = 1e-9
FIXED_POINT_TOL = 1e-10
TRANSPORT_TOL = 1e-8
THEOREM1_TOL = 1e-8


def _record(check, instance, deviation, tol, passed=None, **extra):
    ok = bool(deviation <= tol) if passed is None else bool(passed)
    return {"check": check, "instance": instance, "max_deviation": float(deviation),
            "tolerance": tol, "passed": ok, **extra}


def decomposition_checks(mdp, pi, instance):
    """Rank-one-plus-null reconstruction, null-space residual and the fixed-point identity."""
    v = state_values(mdp, pi)
    dec = decompose_policy(mdp, pi, v)
    recon = float(np.max(np.abs(dec.reconstruct() - pi.data)))
    null = float(np.max(np.abs(dec.null_part @ dec.pivot)))
    fixed = float(np.max(np.abs(v - pi.data @ dec.pivot)))
    return [
        _record("lemma1-reconstruction", instance, recon, DECOMPOSITION_TOL),
        _record("lemma1-null-residual", instance, null, DECOMPOSITION_TOL),
        _record("fixed-point", instance, fixed, FIXED_POINT_TOL),
    ]


def lemma1_suite(seed=0, n_instances=100, max_states=6, max_actions=4):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_instances):
        S = int(rng.integers(1, max_states + 1))
        A = int(rng.integers(1, max_actions + 1))
        mdp = random_mdp(rng, S, A, discount=float(rng.uniform(0.5, 0.99)))
        pi = policy_matrix(mdp, random_policy_table(rng, S, A))
        out += decomposition_checks(mdp, pi, f"random-{k} S={S} A={A}")
    return out


def transport_record(t1, t2, mode, instance, shared_dynamics=True, adjacency=None):
    A = build_state_map(t1.values, t2.values, mode=mode, adjacency=adjacency)
    pair = lemma2_transport(t1, t2, A, shared_dynamics=shared_dynamics)
    B = pair.action_map
    # the rank-one part of Pi1 survives the right action map; its null part is annihilated
    dec = decompose_policy(t1.mdp, t1.pi, t1.values)
    annihilated = float(np.max(np.abs(dec.null_part @ B)))
    gap = value_consistency_gap(pair, t1, t2)
    return _record("lemma2-transport", instance, gap, TRANSPORT_TOL,
                   passed=gap <= TRANSPORT_TOL and annihilated <= TRANSPORT_TOL,
                   null_annihilation=annihilated, state_map=mode)


def lemma2_suite(seed=0, n_pairs=50, grid_size=4):
    rng = np.random.default_rng(seed + 1)
    out = []
    for k in range(n_pairs):
        S = int(rng.integers(2, 7))
        A = int(rng.integers(1, 5))
        m1 = random_mdp(rng, S, A, discount=float(rng.uniform(0.5, 0.95)))
        m2 = m1.with_reward(rng.uniform(-1, 1, size=S * A))
        t1, t2 = solve_task(m1), solve_task(m2)
        out.append(transport_record(t1, t2, "least-squares", f"reward-pair-{k} S={S} A={A}"))
    # four goals in the corners of one gridworld, every ordered pair
    n = grid_size
    corners = [(0, 0), (0, n - 1), (n - 1, 0), (n - 1, n - 1)]
    tasks = {g: solve_task(GridworldTask(n, n, g).to_mdp()) for g in corners}
    for g1 in corners:
        for g2 in corners:
            if g1 != g2:
                out.append(transport_record(tasks[g1], tasks[g2], "permutation", f"grid{n} goal{g1}->goal{g2}",
                                            shared_dynamics=False,
                                            adjacency=(GridworldTask(n, n, g1).adjacency(),
                                                       GridworldTask(n, n, g2).adjacency())))
    return out


def theorem1_suite(sizes=(3, 4)):
    out = []
    for n in sizes:
        for gx in range(n):
            for gy in range(n):
                ref = GridworldTask(n, n, (gx, gy))
                for name in SQUARE_SYMMETRIES:
                    rep = verify_theorem1(ref, ref.transformed(name))
                    out.append(_record("theorem1", f"grid{n} goal({gx},{gy}) {name}", rep.max_deviation,
                                       THEOREM1_TOL, passed=rep.passed,
                                       greedy_agreement=rep.greedy_agreement, goal_reached=rep.goal_reached))
    return out


def theorem2_suite(seed=0, trials=100):
    rng = np.random.default_rng(seed + 2)
    out = []
    for k in range(trials):
        n_support = int(rng.integers(2, 8))
        support = np.sort(rng.uniform(-3, 3, size=n_support))
        f_star, f_meta = random_lipschitz_pair(rng, support)
        L = max(f_star.lipschitz(), f_meta.lipschitz())
        head = rng.normal(size=(2, 2))
        x = rng.uniform(-5, 5, size=int(rng.integers(5, 30)))
        x[: n_support // 2] = support[: n_support // 2]  # some test inputs are covered exactly
        rep = adaptation_bound(f_meta, f_star, head, x, support, L, check=False)
        # enlarging the support can only shrink the OOD count and the coverage radius
        bigger = np.concatenate([support, rng.uniform(-5, 5, size=3)])
        ood, dist = coverage_terms(x, bigger)
        bound_big = 2.0 * L * rep.head_op_norm * int(ood.sum()) * (float(dist[ood].max()) if ood.any() else 0.0)
        monotone = bound_big <= rep.bound_value + 1e-12
        out.append(_record("theorem2-bound", f"trial-{k}", max(0.0, rep.empirical_error - rep.bound_value), 1e-12,
                           passed=rep.holds and monotone, bound=rep.bound_value,
                           empirical=rep.empirical_error, enlarged_bound=bound_big))
    return out


def scenario_suite(paths, seed=0):
    """Decomposition checks on scenario files, for the optimal and one random policy each."""
    rng = np.random.default_rng(seed)
    out = []
    for path in paths:
        mdp = read_scenario(path)
        pi, _ = solve_optimal_policy(mdp)
        out += decomposition_checks(mdp, pi, f"{Path(path).name} optimal")
        rand = policy_matrix(mdp, random_policy_table(rng, mdp.n_states, mdp.n_actions))
        out += decomposition_checks(mdp, rand, f"{Path(path).name} random")
    return out


def run_theory_suite(seed=0, trials=100, n_mdps=100, n_transport=50, scenarios=None):
    started = time.perf_counter()
    records = []
    if scenarios:
        records += scenario_suite(scenarios, seed)
    else:
        records += lemma1_suite(seed, n_mdps)
        records += lemma2_suite(seed, n_transport)
        records += theorem1_suite()
    records += theorem2_suite(seed, trials)
    elapsed = time.perf_counter() - started
    return records, elapsed


def write_report(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return Path(path)


def summarize(records):
    """Per-check counts and worst deviation."""
    out = {}
    for r in records:
        s = out.setdefault(r["check"], {"total": 0, "passed": 0, "max_deviation": 0.0})
        s["total"] += 1
        s["passed"] += r["passed"]
        s["max_deviation"] = max(s["max_deviation"], r["max_deviation"])
    return out
