"""Benchmark problems with closed-form oracles.

``ex1``  terminal-law matching, ``ex2``  optimal liquidation with permanent
price impact, ``ex3``  linear-quadratic problem with an explicit mean-field
value function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import rng
from .dynamics import ClusteredSampler, DiracSampler, ProblemSpec, rollout
from .errors import DegenerateError, DomainError
from .measure import Measure, Quantized


def _per_player(val, like):
    """Broadcast a ``(B, 1, 1)`` system-level quantity to ``(B, N)``."""
    B, N = ad.value_of(like).shape[:2]
    return ad.broadcast_to(ad.reshape(val, (B, 1)), (B, N))


# -- Example 1 ------------------------------------------------------------------

@dataclass(frozen=True)
class Example1Params:
    T: float = 1.0
    m0: float = 0.0
    sigma0: float = 1.0


def example1_spec(params: Example1Params = Example1Params()) -> ProblemSpec:
    """``b = a``, ``sigma = 1``, ``f = 0``, controls in ``[0, 1]``.

    Every player pays ``(mean(x) - m0)^2 + (var(x) - sigma0^2)^2`` at ``T``
    (variance with the 1/N convention).
    """
    m0, s2 = params.m0, params.sigma0 ** 2

    def drift(t, x, a, emp):
        return a

    def diffusion(t, x, a, emp):
        return 1.0

    def running(t, x, a, emp):
        return np.zeros(ad.value_of(x).shape[:2])

    def terminal(x, emp):
        val = (emp.mean_x() - m0) ** 2 + (emp.var_x() - s2) ** 2
        return _per_player(val, x)

    return ProblemSpec(d=1, m=1, d_A=1, T=params.T, drift=drift, diffusion=diffusion,
                       running_cost=running, terminal_cost=terminal,
                       control_box=(0.0, 1.0), name="ex1")


def example1_exact(x0: float) -> float:
    """``v(0, delta_{x0}) = x0^2`` for ``T = 1, m0 = 0, sigma0 = 1``."""
    if x0 < 0:
        raise DomainError("example1_exact needs x0 >= 0")
    return float(x0) ** 2


def example1_mean_field_value(spec: ProblemSpec, policy, x0: float, N: int, M: int,
                              dt: float, seed: int, m0: float = 0.0, sigma0: float = 1.0) -> float:
    """Mean-field cost of a feedback control started from ``delta_{x0}``.

    ``M`` systems of ``N`` players are simulated and the terminal law is
    taken as the pooled sample of all ``M * N`` particles, so the estimate
    does not carry the ``O(1/N)`` bias of the within-system variance.
    """
    key = rng.derive_key(seed)
    samples = np.arange(M)
    x = DiracSampler((x0,), N)(key, samples)
    res = rollout(spec, policy, x, rng.derive_key(key, "noise"), samples, dt)
    xt = np.asarray(res.terminal_state).ravel()
    return float((xt.mean() - m0) ** 2 + (xt.var() - sigma0 ** 2) ** 2)


# -- Example 2 ------------------------------------------------------------------

@dataclass(frozen=True)
class Example2Params:
    T: float = 1.0
    k: float = 0.2
    lam: float = 0.4
    phi: float = 0.1
    psi: float = 2.5
    sigma: float = 1.0
    s0: float = 5.0
    q0_mean: float = 10.0
    q0_std: float = 1.0
    epsilon: float = 0.01

    @property
    def constants(self):
        root = math.sqrt(self.phi * self.k)
        d1, d2 = root - self.psi, root + self.psi
        return d1, d2, 2 * d1 + self.lam, 2 * d2 - self.lam, math.sqrt(self.phi / self.k)


def example2_spec(params: Example2Params = Example2Params()) -> ProblemSpec:
    """State ``(S, Q)``: price and inventory, trading speed ``a``.

    ``dS = lam E[a] dt + sigma dW``, ``dQ = a dt``, running cost
    ``a S + k a^2 + phi Q^2`` and terminal cost ``-Q (S - psi Q)``.
    """
    if params.epsilon <= 0:
        raise DomainError("the liquidation problem has degenerate noise and needs epsilon > 0")
    p = params
    sig = np.array([[p.sigma], [0.0]])

    def drift(t, x, a, emp):
        shape = ad.value_of(a).shape
        return ad.concatenate([p.lam * ad.broadcast_to(emp.mean_a(), shape), a], axis=-1)

    def diffusion(t, x, a, emp):
        return sig

    def running(t, x, a, emp):
        av = a[..., 0]
        return av * x[..., 0] + p.k * av * av + p.phi * x[..., 1] * x[..., 1]

    def terminal(x, emp):
        q = x[..., 1]
        return -q * (x[..., 0] - p.psi * q)

    return ProblemSpec(d=2, m=1, d_A=1, T=p.T, drift=drift, diffusion=diffusion,
                       running_cost=running, terminal_cost=terminal,
                       epsilon=p.epsilon, name="ex2")


def _ex2_denominators(p: Example2Params):
    d1, d2, c1, c2, r = p.constants
    em, ep = math.exp(-r * p.T), math.exp(r * p.T)
    D = d1 * em + d2 * ep
    C = c1 * em + c2 * ep
    tol = 1e-12
    if abs(D) <= tol * (abs(d1) * em + abs(d2) * ep) or abs(C) <= tol * (abs(c1) * em + abs(c2) * ep):
        raise DegenerateError("explicit liquidation control has a vanishing denominator")
    return D, C


def example2_optimal_control(t, q0, eq0, params: Example2Params = Example2Params()):
    """Explicit optimal trading speed at time ``t`` for initial inventory ``q0``.

    The first term depends on ``q0`` only and the second on ``E[Q0]`` only,
    so the control is not of closed-loop form.
    """
    p = params
    d1, d2, c1, c2, r = p.constants
    D, C = _ex2_denominators(p)
    t = np.asarray(t, dtype=np.float64)
    own = np.asarray(q0) * r * (d1 * np.exp(-r * (p.T - t)) - d2 * np.exp(r * (p.T - t))) / D
    common = np.asarray(eq0) * 2 * p.lam * p.phi * (np.exp(-r * t) + np.exp(r * t)) / (D * C)
    out = own + common
    return float(out) if out.ndim == 0 else out


def example2_price_trajectory(t, params: Example2Params = Example2Params(), eq0=None):
    """``E[S_t] = s0 + lam * int_0^t E[alpha_u] du`` in closed form."""
    p = params
    eq0 = p.q0_mean if eq0 is None else eq0
    d1, d2, _, _, r = p.constants
    D, C = _ex2_denominators(p)
    t = np.asarray(t, dtype=np.float64)
    em, ep = np.exp(-r * t), np.exp(r * t)
    own = (d1 * math.exp(-r * p.T) * (ep - 1) - d2 * math.exp(r * p.T) * (1 - em)) / D
    common = 2 * p.lam * p.phi * ((1 - em) + (ep - 1)) / (r * D * C)
    out = p.s0 + p.lam * eq0 * (own + common)
    return float(out) if out.ndim == 0 else out


class Example2ExplicitPolicy:
    """The explicit control, open-loop in each player's initial inventory.

    ``q0`` holds the initial inventories ``(B, N)`` of the batch that will be
    simulated; the state argument is ignored.
    """

    def __init__(self, q0, eq0, params: Example2Params = Example2Params()):
        self.q0 = np.asarray(q0, dtype=np.float64)      # (B, N)
        self.eq0 = eq0
        self.params = params

    def __call__(self, t, x_flat):
        tv = float(np.asarray(ad.value_of(t)).ravel()[0])
        return example2_optimal_control(tv, self.q0, self.eq0, self.params)


@dataclass(frozen=True)
class Example2Sampler:
    """``S0 = s0`` and ``Q0 ~ N(q0_mean, q0_std^2)`` for every player."""

    params: Example2Params
    n_players: int
    q_spread: float = 1.0

    def __call__(self, key, samples):
        p = self.params
        z = rng.normals(key, samples, rng.INIT_STEP, self.n_players, 1)[..., 0]
        q = p.q0_mean + self.q_spread * p.q0_std * z
        s = np.full_like(q, p.s0)
        return np.stack([s, q], axis=-1)


def example2_explicit_cost(N: int, M: int, dt: float, seed: int,
                           params: Example2Params = Example2Params()):
    """Monte Carlo cost and mean price path under the explicit control.

    The common term uses ``E[Q0] = q0_mean``.  Returns
    ``(cost, grid, mean_price)`` with the price averaged over players and
    systems.
    """
    spec = example2_spec(params)
    key = rng.derive_key(seed)
    samples = np.arange(M)
    x0 = Example2Sampler(params, N)(rng.derive_key(key, "init"), samples)
    q0 = x0[..., 1]
    policy = Example2ExplicitPolicy(q0, params.q0_mean, params)
    S = spec.n_steps(dt)
    prices = np.empty(S + 1)
    prices[0] = x0[..., 0].mean()

    def observe(j, xv, av):
        prices[j] = xv[..., 0].mean()

    res = rollout(spec, policy, x0, rng.derive_key(key, "noise"), samples, dt, observer=observe)
    cost = float(np.mean(res.sample_costs()))
    return cost, np.linspace(0.0, spec.T, S + 1), prices


# -- Example 3 ------------------------------------------------------------------

@dataclass(frozen=True)
class Example3Params:
    T: float = 1.0
    truncation: float = 10.0


def example3_spec(params: Example3Params = Example3Params(), training_box=None) -> ProblemSpec:
    """``b = a``, ``sigma = sqrt 2``, ``f = a^2/2``, ``g = x^2/2`` clamped outside ``[-R, R]``."""
    R = params.truncation
    if training_box is not None:
        half = max(abs(training_box[0]), abs(training_box[1]))
        if R < half + 3 * math.sqrt(2 * params.T):
            raise DomainError("truncation box must exceed the training box by 3 terminal std")

    def drift(t, x, a, emp):
        return a

    def diffusion(t, x, a, emp):
        return math.sqrt(2.0)

    def running(t, x, a, emp):
        return 0.5 * a[..., 0] * a[..., 0]

    def terminal(x, emp):
        y = ad.clip(x[..., 0], -R, R)
        return 0.5 * y * y

    return ProblemSpec(d=1, m=1, d_A=1, T=params.T, drift=drift, diffusion=diffusion,
                       running_cost=running, terminal_cost=terminal, name="ex3")


def example3_exact_w(t, x, T: float = 1.0):
    """``w(t, x) = log(1 + T - t) + x^2 / (2 (1 + T - t))``."""
    tau = 1.0 + T - np.asarray(t, dtype=np.float64)
    if np.any(tau < 1.0) or np.any(tau > 1.0 + T):
        raise DomainError("t must lie in [0, T]")
    x = np.asarray(x, dtype=np.float64)
    out = np.log(tau) + x * x / (2.0 * tau)
    return float(out) if out.ndim == 0 else out


def example3_exact_value(t: float, mu: Measure, T: float = 1.0) -> float:
    """``v(t, mu) = log(1 + T - t) + E_mu[x^2] / (2 (1 + T - t))``."""
    if mu.dim != 1:
        raise DomainError("the example is one-dimensional")
    m2 = float(mu.second_moment()[0])
    tau = 1.0 + T - t
    return math.log(tau) + m2 / (2.0 * tau)


class Example3ExactValue:
    """N-player value ``u(t, x) = (1/N) sum_n w(t, x_n)`` written with tape ops.

    ``t`` may be a scalar or one entry per row; ``x`` is ``(B, N)``.
    """

    def __init__(self, N: int, T: float = 1.0):
        self.N, self.T = N, T

    def __call__(self, t, x):
        xv = ad.value_of(x)
        B = xv.shape[0]
        tv = ad.value_of(t)
        if np.ndim(tv) == 0 or np.size(tv) == 1:
            t = ad.broadcast_to(ad.reshape(t, (1,)), (B,))
        tau = (1.0 + self.T) - t
        return ad.log(tau) + ad.mean(x * x, axis=-1) / (2.0 * tau)

    def gradient(self, t, x):
        tau = 1.0 + self.T - np.reshape(np.asarray(t, dtype=np.float64), (-1, 1))
        return np.asarray(x) / (self.N * tau)


class Example3OptimalPolicy:
    """``a_n = -N d u / d x_n = -x_n / (1 + T - t)``."""

    def __init__(self, N: int, T: float = 1.0):
        self.N, self.T = N, T

    def __call__(self, t, x_flat):
        tau = (1.0 + self.T) - t
        return -x_flat / tau


def example3_paper_w(t: float, x: float, T: float = 1.0, R: float = np.inf) -> float:
    """``w`` by numerical quadrature of the log-Gaussian integral formula.

    ``w(t, x) = -2 log( (4 pi (T - t))^{-1/2} int exp(-(x - y)^2 / (4 (T - t)) - g(y) / 2) dy )``
    with ``g(y) = y^2 / 2`` clamped outside ``[-R, R]``.  Slow; meant as an
    independent check of the closed form.
    """
    from scipy.integrate import quad

    s = T - t
    if s <= 0:
        y = min(max(x, -R), R)
        return 0.5 * y * y

    def g(y):
        y = min(max(y, -R), R)
        return 0.5 * y * y

    def integrand(y):
        return math.exp(-(x - y) ** 2 / (4 * s) - g(y) / 2) / math.sqrt(4 * math.pi * s)

    val, _ = quad(integrand, -np.inf, np.inf, epsabs=1e-14, epsrel=1e-13, limit=200)
    return -2.0 * math.log(val)


# -- registry -------------------------------------------------------------------

# input/output normalisation of the control and value networks
NETWORK_DEFAULTS = {
    "ex1": ({}, {}),
    "ex2": (dict(state_shift=(5.0, 10.0), state_scale=(1.0, 2.0), output_shift=-10.0, output_scale=5.0),
            dict(state_shift=(5.0, 10.0), state_scale=(1.0, 2.0), output_shift=-8.0, output_scale=5.0)),
    "ex3": ({}, dict(state_scale=(2.0,), output_shift=1.0)),
}


@dataclass(frozen=True)
class Benchmark:
    name: str
    spec: ProblemSpec
    params: object
    training_box: tuple

    @property
    def policy_overrides(self) -> dict:
        return dict(NETWORK_DEFAULTS[self.name][0])

    @property
    def value_overrides(self) -> dict:
        return dict(NETWORK_DEFAULTS[self.name][1])

    def sampler(self, N: int):
        if self.name == "ex2":
            return Example2Sampler(self.params, N)
        lo, hi = self.training_box
        return ClusteredSampler((lo,), (hi,), N, spread=(hi - lo) / 2)


def get_benchmark(name: str, overrides: dict | None = None) -> Benchmark:
    """Look up ``ex1``, ``ex2`` or ``ex3`` with optional parameter overrides."""
    overrides = dict(overrides or {})
    box = overrides.pop("training_box", None)
    if name == "ex1":
        p = replace(Example1Params(), **overrides)
        return Benchmark(name, example1_spec(p), p, tuple(box or (-1.0, 1.0)))
    if name == "ex2":
        p = replace(Example2Params(), **overrides)
        return Benchmark(name, example2_spec(p), p, tuple(box or (5.0, 15.0)))
    if name == "ex3":
        p = replace(Example3Params(), **overrides)
        box = tuple(box or (-2.0, 2.0))
        return Benchmark(name, example3_spec(p, box), p, box)
    raise KeyError(f"unknown benchmark {name!r}")


BENCHMARKS = ("ex1", "ex2", "ex3")
