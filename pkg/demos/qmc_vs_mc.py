"""Sobol versus pseudo-random integration of a known value function.

The linear-quadratic example has the closed form

    u(t, x) = (1/N) sum_n [log(1 + T - t) + x_n^2 / (2 (1 + T - t))],

so against mu^N with mu = N(0, 1) the integral at t = 0 is log 2 + 1/4 for
every N.  We integrate it with both point sets and watch the error shrink
with the budget.  In ten dimensions the unscrambled Sobol points only
overtake the pseudo-random average once the budget reaches about 2^10.
"""
import math

import numpy as np

from mfcglobal import bench
from mfcglobal import measure as ms

N = 10
v = bench.Example3ExactValue(N)
mu = ms.Gaussian(0.0, 1.0)
exact = math.log(2.0) + 0.25

print(f"{'points':>7} {'sobol err':>11} {'pseudo err (20 seeds)':>22}")
for k in range(6, 14, 2):
    n = 2 ** k
    qmc = abs(ms.integrate_value(v, 0.0, mu, N, n) - exact)
    mc = np.mean([abs(ms.integrate_value(v, 0.0, mu, N, n, mode="pseudo", seed=s) - exact)
                  for s in range(20)])
    print(f"{n:7d} {qmc:11.2e} {mc:22.2e}")

# A quantized measure with few atoms is integrated exactly by enumeration.
two = ms.Quantized(np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]))
print("two atoms, N=4:", ms.integrate_value(bench.Example3ExactValue(4), 0.0, two, 4),
      "exact:", bench.example3_exact_value(0.0, two))
