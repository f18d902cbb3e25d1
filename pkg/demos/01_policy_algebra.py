"""Policy matrices, their rank-one split, and transport between symmetric gridworlds.

Run: python demos/01_policy_algebra.py
"""
import numpy as np

from apb.tabular import decompose_policy, policy_matrix, random_mdp, random_policy_table, state_values
from apb.transfer import GridworldTask, verify_theorem1

rng = np.random.default_rng(0)

# A small random MDP and a stochastic policy.
mdp = random_mdp(rng, n_states=4, n_actions=3)
pi = policy_matrix(mdp, random_policy_table(rng, 4, 3))
V = state_values(mdp, pi)
print("state values:", np.round(V, 4))

# The policy matrix splits into a rank-one piece built from V and the pivot
# vector gamma*P*V + r, plus a part that annihilates the pivot.
dec = decompose_policy(mdp, pi, V)
print("reconstruction error:", np.abs(dec.reconstruct() - pi.data).max())
print("null part on pivot:  ", np.abs(dec.null_part @ dec.pivot).max())
print("fixed point residual:", np.abs(V - pi.data @ dec.pivot).max())

# Transport an optimal gridworld policy onto a rotated copy of the task and
# compare the transported greedy actions with the rotated task's own optimum.
reference = GridworldTask(4, 4, goal=(0, 3))
for name in ("rot90", "flip_rows", "transpose"):
    report = verify_theorem1(reference, reference.transformed(name))
    print(f"{name:10s} greedy agreement {report.greedy_agreement:.0%}, "
          f"goal reached from every cell: {report.goal_reached}")
