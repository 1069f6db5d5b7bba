"""ISTA and FISTA on a small random LASSO problem, against a coordinate-descent reference.

Run: python demos/ista_vs_fista.py
"""
import numpy as np

from sparseloc.solvers import IstaConfig, fista, ista, lasso_objective, lasso_oracle_cd

rng = np.random.default_rng(3)
a = rng.normal(size=(16, 64)) / 4
x_true = np.zeros(64)
x_true[rng.choice(64, 3, replace=False)] = rng.normal(size=3)
y = a @ x_true
lam = 0.1

best = lasso_objective(a, y, lasso_oracle_cd(a, y, lam), lam)
_, trace_i = ista(a, y, IstaConfig(lam, 2000))
_, trace_f = fista(a, y, IstaConfig(lam, 2000))

print(" iters   ISTA gap    FISTA gap")
for k in (10, 30, 100, 300, 1000, 2000):
    print(f"{k:6d}  {(trace_i[k] - best) / best:9.2e}  {(trace_f[k] - best) / best:9.2e}")
print("ISTA never increases the objective:", bool(np.all(np.diff(trace_i) <= 1e-14 * trace_i[:-1])))
