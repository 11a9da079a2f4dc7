"""Why the Example 1 value is read off the pooled terminal law.

The cost is (E[X_T] - m0)^2 + (Var X_T - sigma0^2)^2, a function of the
law of X_T.  Inside one N-player system the law is replaced by the
empirical measure of N particles, whose variance is biased by a factor
(N-1)/N.  We train a small control and compare the average within-system
cost with the cost of the pooled sample of all systems.
"""
import numpy as np

from mfcglobal import bench
from mfcglobal import dynamics as dy
from mfcglobal import policy as pl
from mfcglobal import rng

N, dt = 10, 0.02
b = bench.get_benchmark("ex1")
net = pl.policy_network_config(b.spec, N, **b.policy_overrides)
cfg = pl.TrainConfig(learning_rate=1e-2, batch_size=256, max_iters=300, patience=50, dt=dt, seed=0)
theta, state = pl.train_policy(b.spec, cfg, b.sampler(N), N, net_config=net)
policy = pl.NeuralPolicy(net, theta)
print(f"trained {state.iterations} iterations, best batch cost {state.best_cost:.4f}")

for x0 in (0.0, 0.25, 0.5):
    key = rng.derive_key(3)
    x = dy.DiracSampler((x0,), N)(key, np.arange(2000))
    res = dy.rollout(b.spec, policy, x, rng.derive_key(key, "noise"), np.arange(2000), dt)
    within = float(np.mean(res.sample_costs()))
    pooled = bench.example1_mean_field_value(b.spec, policy, x0, N, 2000, dt, 3)
    print(f"x0={x0:4.2f}  within-system {within:.4f}  pooled {pooled:.4f}  exact {x0 ** 2:.4f}")
