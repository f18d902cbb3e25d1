"""How far a meta-trained backbone can drift on inputs outside its training support.

Two 1-Lipschitz maps agree on a set of support points.  Their disagreement on
test inputs, seen through a linear head, is bounded by the number of
out-of-support inputs times their distance to the support.

Run: python demos/02_coverage_bound.py
"""
import numpy as np

from apb.transfer import adaptation_bound, random_lipschitz_pair

rng = np.random.default_rng(7)
head = rng.normal(size=(2, 2))
test = rng.uniform(-4, 4, size=30)

for n_support in (3, 6, 12, 24):
    support = np.linspace(-3, 3, n_support)
    f_star, f_meta = random_lipschitz_pair(rng, support)
    r = adaptation_bound(f_meta, f_star, head, test, support, lipschitz_L=1.0)
    print(f"support {n_support:2d}: {r.ood_count:2d} OOD inputs, eps_max {r.eps_max:.3f}, "
          f"error {r.empirical_error:7.3f} <= bound {r.bound_value:8.3f}")
