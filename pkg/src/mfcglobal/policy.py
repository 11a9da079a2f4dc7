"""Monte Carlo policy gradient for the cooperative N-player problem.

The control of all players is one network ``alpha_theta(t, x_1..x_N)`` with
``N * d_A`` outputs.  The cost of a batch of rollouts is differentiated with
respect to ``theta`` by a reverse sweep through the whole simulation, with the
Brownian increments held fixed (pathwise gradient).
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import network as nw
from . import rng
from .dynamics import ProblemSpec, rollout
from .errors import Diverged, NumericError

log = logging.getLogger(__name__)


def policy_network_config(spec: ProblemSpec, n_players: int, **overrides) -> nw.MLPConfig:
    """Control-network config whose output range matches the control box."""
    kw = dict(state_dim=n_players * spec.d, output_dim=n_players * spec.d_A)
    if spec.control_box is not None:
        lo, hi = spec.control_box
        if (lo, hi) == (0.0, 1.0):
            kw["output_transform"] = "sigmoid"
        else:
            kw.update(output_transform="affine-sigmoid", output_bounds=(lo, hi))
    kw.update(overrides)
    return nw.MLPConfig(**kw)


class NeuralPolicy:
    """Feedback control ``(t, x_flat) -> controls_flat`` backed by a network.

    ``params`` may be a tape variable, in which case the controls are too.
    """

    def __init__(self, config: nw.MLPConfig, params):
        self.config = config
        self.params = params

    def __call__(self, t, x_flat):
        return nw.forward(self.params, self.config, t, x_flat)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_iters: int = 1000
    patience: int = 100
    dt: float = 0.01
    seed: int = 0
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    tol: float = 1e-6
    # > 0: score each iterate on a fixed batch (common random numbers)
    validation_size: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.patience < 1 or self.max_iters < 0:
            raise ValueError("batch_size and patience must be >= 1, max_iters >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class GradientDescent:
    """The literal update ``params - lr * grad``."""

    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grad):
        return params - self.lr * grad


def make_optimizer(name, lr, betas=(0.9, 0.999), eps=1e-8):
    return Adam(lr, betas, eps) if name == "adam" else GradientDescent(lr)


@dataclass
class PolicyTrainState:
    theta: np.ndarray
    best_theta: np.ndarray
    best_cost: float = np.inf
    iterations: int = 0
    history: list = field(default_factory=list)
    optimizer: object = None


def _batch(spec, net_config, params, M, dt, init_sampler, seed, offset=0):
    n_players = net_config.state_dim // spec.d
    key = rng.derive_key(seed)
    samples = np.arange(offset, offset + M)
    x0 = np.asarray(init_sampler(rng.derive_key(key, "init"), samples), dtype=np.float64)
    if x0.shape[1:] != (n_players, spec.d):
        raise ValueError(f"sampler returned {x0.shape}, expected (M, {n_players}, {spec.d})")
    res = rollout(spec, NeuralPolicy(net_config, params), x0, rng.derive_key(key, "noise"), samples, dt)
    return ad.mean(res.sample_costs())


def cost_estimate(spec: ProblemSpec, net_config: nw.MLPConfig, theta, M: int, dt: float,
                  init_sampler, seed: int) -> float:
    """Sampled cost ``(1/MN) sum_m sum_n [sum_s f dt + g]`` of the control ``theta``."""
    return float(_batch(spec, net_config, np.asarray(theta), M, dt, init_sampler, seed))


def gradient_estimate(spec: ProblemSpec, net_config: nw.MLPConfig, theta, M: int, dt: float,
                      init_sampler, seed: int, with_cost: bool = False):
    """Pathwise Monte Carlo gradient of the sampled cost with respect to ``theta``."""
    tape = ad.Tape()
    p = tape.var(theta)
    cost = _batch(spec, net_config, p, M, dt, init_sampler, seed)
    if not ad.is_var(cost):
        g = np.zeros(p.shape)
        c = float(cost)
    else:
        (g,) = ad.backward_grad(tape, cost, [p])
        c = float(cost.value)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite policy gradient")
    return (c, g) if with_cost else g


def _write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["iter", "cost", "grad_norm", "wall_time"])
        w.writeheader()
        w.writerows(history)


def train_policy(spec: ProblemSpec, config: TrainConfig, init_sampler, n_players: int,
                 net_config: nw.MLPConfig | None = None, theta0=None, out_dir=None):
    """Policy-gradient iteration with patience stopping.

    Every iteration draws fresh initial states and Brownian increments.
    Training stops once ``patience`` consecutive iterations fail to lower the
    best cost by more than ``tol``, or after ``max_iters`` updates.  Returns
    ``(best_theta, state)``.
    """
    net_config = net_config or policy_network_config(spec, n_players)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    theta = nw.init_params(net_config, config.seed) if theta0 is None else np.array(theta0, dtype=np.float64)
    opt = make_optimizer(config.optimizer, config.learning_rate, config.betas, config.adam_eps)
    state = PolicyTrainState(theta=theta, best_theta=theta.copy(), optimizer=opt)
    base = rng.derive_key(config.seed, "policy")
    val_seed = rng.derive_key(base, "validation")
    start = time.perf_counter()

    def evaluate(it, params):
        cost, g = gradient_estimate(spec, net_config, params, config.batch_size, config.dt,
                                    init_sampler, rng.derive_key(base, "iter", it), with_cost=True)
        if config.validation_size:
            cost = cost_estimate(spec, net_config, params, config.validation_size, config.dt,
                                 init_sampler, val_seed)
        return cost, g

    cost, g = evaluate(0, theta)
    initial = cost
    state.best_cost = cost
    state.history.append(dict(iter=0, cost=cost, grad_norm=float(np.linalg.norm(g)),
                              wall_time=time.perf_counter() - start))
    wait = 0
    while state.iterations < config.max_iters and wait < config.patience:
        theta = opt.step(theta, g)
        state.iterations += 1
        cost, g = evaluate(state.iterations, theta)
        if not np.isfinite(cost) or cost > 1e6 * max(abs(initial), 1e-8):
            raise Diverged(f"cost {cost!r} at iteration {state.iterations} (initial {initial!r})")
        state.history.append(dict(iter=state.iterations, cost=cost, grad_norm=float(np.linalg.norm(g)),
                                  wall_time=time.perf_counter() - start))
        if cost < state.best_cost - config.tol:
            state.best_cost, state.best_theta, wait = cost, theta.copy(), 0
        else:
            wait += 1
        if state.iterations % 50 == 0:
            log.info("policy iter %d cost %.6g best %.6g", state.iterations, cost, state.best_cost)
        if out_dir is not None and config.checkpoint_every and state.iterations % config.checkpoint_every == 0:
            nw.save_checkpoint(Path(out_dir) / "policy.mfcnet", state.best_theta, net_config, config.seed)
    state.theta = theta
    if out_dir is not None:
        _write_history(Path(out_dir) / "policy_history.csv", state.history)
        nw.save_checkpoint(Path(out_dir) / "policy.mfcnet", state.best_theta, net_config, config.seed)
    return state.best_theta, state
