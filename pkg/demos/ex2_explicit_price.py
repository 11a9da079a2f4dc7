"""Optimal execution with price impact: the explicit control in simulation.

Each trader liquidates an inventory Q while the common price S drifts with
the average trading rate.  The closed-form optimal rate is available, so we
simulate the N-player system under it and compare the simulated mean price
with the closed-form expected price path.
"""
import numpy as np

from mfcglobal import bench

p = bench.Example2Params()
for N in (10, 100):
    cost, grid, price = bench.example2_explicit_cost(N, 2000, 0.01, seed=0, params=p)
    exact = bench.example2_price_trajectory(grid, p)
    err = np.abs(price - exact) / np.abs(exact)
    print(f"N={N:4d}  cost {cost:8.4f}  sup rel price err {err.max():.4f}")

print("\n   t   simulated   closed form")
for j in range(0, grid.size, 20):
    print(f"{grid[j]:4.1f}  {price[j]:10.4f}  {exact[j]:11.4f}")
