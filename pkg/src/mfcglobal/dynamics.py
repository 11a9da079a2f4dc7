"""N-player particle system with empirical-measure coupling.

A :class:`ProblemSpec` bundles the mean-field coefficients as vectorised
callbacks.  Each callback receives the states of all players of a batch of
systems at once and returns the coefficient of every player, with the law
argument replaced by the empirical measure of that system::

    drift(t, x, a, emp)          -> (B, N, d)
    diffusion(t, x, a, emp)      -> (B, N, d, m)   (or anything broadcastable)
    running_cost(t, x, a, emp)   -> (B, N)
    terminal_cost(x, emp)        -> (B, N)

where ``x`` is ``(B, N, d)``, ``a`` is ``(B, N, d_A)``, ``emp`` an
:class:`EmpiricalMeasure`, and ``t`` a float or a ``(B, 1)`` array.  Callbacks
must be written with :mod:`mfcglobal.autodiff` functions (or plain arithmetic)
so that rollouts can run on the tape.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from . import rng
from .errors import DimensionError, NumericError


@dataclass(frozen=True)
class ProblemSpec:
    """One extended mean field control instance.

    Boundedness and continuity of the coefficients are the caller's
    responsibility; nothing here checks them.
    """

    d: int
    m: int
    d_A: int
    T: float
    drift: Callable
    diffusion: Callable
    running_cost: Callable
    terminal_cost: Callable
    control_box: tuple | None = None
    epsilon: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        if min(self.d, self.m, self.d_A) < 1:
            raise DimensionError("d, m and d_A must be at least 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    def n_steps(self, dt: float) -> int:
        n = self.T / dt
        steps = int(round(n))
        if steps < 1 or abs(n - steps) > 1e-9 * max(1.0, n):
            raise ValueError(f"T/dt = {n} is not a positive integer")
        return steps


class EmpiricalMeasure:
    """Uniform empirical measure of the players' (state, control) pairs.

    Reductions run over the player axis and keep it, so results broadcast
    against per-player arrays.
    """

    def __init__(self, x, a=None):
        self.x = x
        self.a = a
        self.n = ad.value_of(x).shape[-2]

    def mean_x(self):
        return ad.mean(self.x, axis=-2, keepdims=True)

    def mean_a(self):
        return ad.mean(self.a, axis=-2, keepdims=True)

    def var_x(self):
        """Variance of the states with the 1/N convention."""
        dev = self.x - self.mean_x()
        return ad.mean(dev * dev, axis=-2, keepdims=True)

    def expect(self, fn):
        """Average of ``fn(x_j, a_j)`` over the players."""
        return ad.mean(fn(self.x, self.a), axis=-2, keepdims=True)


def empirical_coeff(kind: str, t, states, controls, n: int, spec: ProblemSpec):
    """Coefficient ``kind`` of player ``n`` (0-based) in one N-player system.

    ``states`` is ``(N, d)`` and ``controls`` ``(N, d_A)``; ``kind`` is one of
    ``"b"``, ``"sigma"``, ``"f"``, ``"g"``.
    """
    x = np.asarray(states, dtype=np.float64)[None]
    N = x.shape[1]
    if not 0 <= n < N:
        raise IndexError(f"player index {n} outside [0, {N})")
    if kind == "g":
        return np.asarray(spec.terminal_cost(x, EmpiricalMeasure(x)))[0, n]
    a = np.asarray(controls, dtype=np.float64)[None]
    emp = EmpiricalMeasure(x, a)
    if kind == "b":
        return np.broadcast_to(spec.drift(t, x, a, emp), (1, N, spec.d))[0, n]
    if kind == "sigma":
        return np.broadcast_to(spec.diffusion(t, x, a, emp), (1, N, spec.d, spec.m))[0, n]
    if kind == "f":
        return np.broadcast_to(spec.running_cost(t, x, a, emp), (1, N))[0, n]
    raise ValueError(f"unknown coefficient kind {kind!r}")


def euler_step(t, states, controls, dW, dB, dt, spec: ProblemSpec):
    """One synchronous Euler-Maruyama step for all players.

    ``dW`` and ``dB`` are Brownian increments (variance ``dt``), shaped like
    ``(..., N, m)`` and ``(..., N, d)``; ``dB`` is ignored when
    ``spec.epsilon == 0``.  Works on arrays with or without a leading batch
    axis and on tape variables.
    """
    emp = EmpiricalMeasure(states, controls)
    drift = spec.drift(t, states, controls, emp)
    sig = spec.diffusion(t, states, controls, emp)
    noise = ad.sum(sig * ad.reshape(dW, ad.value_of(dW).shape[:-1] + (1, spec.m)), axis=-1)
    out = states + drift * dt + noise
    if spec.epsilon > 0:
        out = out + spec.epsilon * dB
    return out


class RolloutResult(NamedTuple):
    terminal_state: object      # (B, N, d)
    running_cost: object        # (B, N), sum of f * h
    terminal_cost: object       # (B, N)
    states: list | None = None
    controls: list | None = None
    dW: list | None = None
    dB: list | None = None

    def player_costs(self):
        return self.running_cost + self.terminal_cost

    def sample_costs(self):
        """Cost of each system averaged over its players, shape (B,)."""
        return ad.mean(self.player_costs(), axis=-1)


def _locate_nonfinite(x, samples, step):
    bad = np.argwhere(~np.isfinite(x))[0]
    raise NumericError(
        f"non-finite state at sample {int(samples[bad[0]])}, player {int(bad[1])}, step {step}")


def rollout(spec: ProblemSpec, policy, x0, key: int, samples, dt: float,
            start=0, t0=None, h=None, record: bool = False, observer=None) -> RolloutResult:
    """Simulate a batch of N-player systems and accumulate their costs.

    Row ``i`` of ``x0`` starts at grid step ``start`` (an int or one int per
    row) and runs to ``T``; rows that have not started are frozen.  Brownian
    increments are drawn from counter streams indexed by ``samples[i]`` and
    the absolute grid step, so rows sharing a sample id share noise.

    By default the step size is ``dt`` and the clock reads ``j * dt``.
    Passing per-row ``t0`` and ``h`` (shape ``(B, 1)``, possibly tape
    variables) runs the same number of steps with size ``h`` starting from
    time ``t0`` instead; this makes the outcome differentiable in the start
    time.  ``policy(t, x_flat)`` maps ``(B, N*d)`` states to ``(B, N*d_A)``
    controls.
    """
    S = spec.n_steps(dt)
    xv = ad.value_of(x0)
    if xv.ndim != 3 or xv.shape[-1] != spec.d:
        raise DimensionError(f"initial states must be (B, N, {spec.d}), got {xv.shape}")
    B, N, d = xv.shape
    samples = np.asarray(samples, dtype=np.int64)
    if samples.shape != (B,):
        raise DimensionError("need one sample id per batch row")
    start = np.broadcast_to(np.asarray(start, dtype=np.int64), (B,))
    first = int(start.min())
    uniform_start = bool(np.all(start == first))
    scaled = t0 is not None
    if scaled != (h is not None):
        raise ValueError("t0 and h must be given together")
    key_w = rng.derive_key(key, "W")
    key_b = rng.derive_key(key, "B")
    if scaled:
        h3 = ad.reshape(h, (B, 1, 1))
        sqrt_h, step3 = ad.sqrt(h3), h3
    else:
        sqrt_h, step3 = math.sqrt(dt), dt
    step = h if scaled else dt

    x = x0
    running = np.zeros((B, N))
    rec_x, rec_a, rec_w, rec_b = ([x] if record else None), [], [], []
    for j in range(first, S):
        mask = None if uniform_start else (start <= j).astype(np.float64)[:, None]
        if scaled:
            local = np.maximum(j - start, 0).astype(np.float64)[:, None]
            t = t0 + local * h
        else:
            t = j * dt
        a = ad.reshape(policy(t, ad.reshape(x, (B, N * d))), (B, N, spec.d_A))
        emp = EmpiricalMeasure(x, a)
        f = spec.running_cost(t, x, a, emp)
        incr = f * step
        running = running + (incr if mask is None else incr * mask)
        zw = rng.normals(key_w, samples, j, N, spec.m)
        zb = rng.normals(key_b, samples, j, N, d) if spec.epsilon > 0 else None
        dW = zw * sqrt_h
        dB = zb * sqrt_h if zb is not None else None
        x_next = euler_step(t, x, a, dW, dB, step3, spec)
        x = x_next if mask is None else x + (x_next - x) * mask[:, :, None]
        xv = ad.value_of(x)
        if not np.all(np.isfinite(xv)):
            _locate_nonfinite(xv, samples, j)
        if record:
            rec_x.append(x)
            rec_a.append(a)
            rec_w.append(dW)
            rec_b.append(dB)
        if observer is not None:
            observer(j + 1, xv, ad.value_of(a))
    g = spec.terminal_cost(x, EmpiricalMeasure(x))
    if not record:
        return RolloutResult(x, running, g)
    return RolloutResult(x, running, g, rec_x, rec_a, rec_w, rec_b)


# -- initial-condition samplers -----------------------------------------------

@dataclass(frozen=True)
class UniformBoxSampler:
    """Every player's state i.i.d. uniform on ``[lo, hi]^d``."""

    lo: tuple
    hi: tuple
    n_players: int

    def __call__(self, key, samples):
        lo, hi = np.atleast_1d(self.lo), np.atleast_1d(self.hi)
        u = rng.uniforms(key, samples, rng.INIT_STEP, self.n_players, lo.size)
        return lo + (hi - lo) * u


@dataclass(frozen=True)
class ClusteredSampler:
    """Players scattered around a per-system centre.

    The centre is uniform on ``[lo, hi]^d`` and the players sit at
    ``centre + r * (2u - 1)`` with one radius ``r ~ U[0, spread]`` per system,
    so near-Dirac and widely spread configurations are both visited.
    """

    lo: tuple
    hi: tuple
    n_players: int
    spread: float = 1.0

    def __call__(self, key, samples):
        lo, hi = np.atleast_1d(self.lo), np.atleast_1d(self.hi)
        d = lo.size
        centre = lo + (hi - lo) * rng.uniforms(key, samples, rng.INIT_STEP, 1, d)
        radius = self.spread * rng.uniforms(key, samples, rng.INIT_STEP - 1, 1, 1)
        u = rng.uniforms(key, samples, rng.INIT_STEP - 2, self.n_players, d)
        return centre + radius * (2.0 * u - 1.0)


@dataclass(frozen=True)
class DiracSampler:
    """All players start at the same point."""

    point: tuple
    n_players: int

    def __call__(self, key, samples):
        p = np.atleast_1d(np.asarray(self.point, dtype=np.float64))
        return np.broadcast_to(p, (len(samples), self.n_players, p.size)).copy()


# -- full trajectory batches --------------------------------------------------

@dataclass
class ParticleBatch:
    """``M`` recorded rollouts on the grid ``0, dt, ..., T``."""

    grid: np.ndarray            # (S+1,)
    states: np.ndarray          # (M, S+1, N, d)
    controls: np.ndarray        # (M, S, N, d_A)
    noise_W: np.ndarray         # (M, S, N, m) increments
    noise_B: np.ndarray | None  # (M, S, N, d) increments, only if epsilon > 0
    samples: np.ndarray = field(default=None)

    @property
    def n_samples(self):
        return self.states.shape[0]


def simulate(spec: ProblemSpec, control_policy, init_sampler, M: int, dt: float,
             seed: int, samples=None, workers: int = 1) -> ParticleBatch:
    """Record ``M`` independent rollouts of the N-player system.

    Variates are keyed by ``(seed, sample id)``; pass ``samples`` to
    regenerate any subset of a larger batch exactly.
    """
    if samples is None:
        if M < 1:
            raise ValueError("M must be at least 1")
        samples = np.arange(M)
    samples = np.asarray(samples, dtype=np.int64)
    key = rng.derive_key(seed)
    S = spec.n_steps(dt)

    def run(chunk):
        x0 = np.asarray(init_sampler(rng.derive_key(key, "init"), chunk), dtype=np.float64)
        res = rollout(spec, control_policy, x0, rng.derive_key(key, "noise"), chunk, dt, record=True)
        states = np.stack([np.asarray(s) for s in res.states], axis=1)
        controls = np.stack([np.asarray(a) for a in res.controls], axis=1)
        w = np.stack(res.dW, axis=1)
        b = np.stack(res.dB, axis=1) if spec.epsilon > 0 else None
        return states, controls, w, b

    chunks = np.array_split(samples, max(1, min(workers, len(samples))))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    cat = lambda i: np.concatenate([p[i] for p in parts], axis=0)
    return ParticleBatch(
        grid=np.linspace(0.0, spec.T, S + 1),
        states=cat(0), controls=cat(1), noise_W=cat(2),
        noise_B=cat(3) if spec.epsilon > 0 else None,
        samples=samples,
    )


def write_batch_csv(batch: ParticleBatch, path) -> Path:
    """Columnar CSV: sample, step, time, player, x_0.., a_0.. (blank at T)."""
    M, S1, N, d = batch.states.shape
    dA = batch.controls.shape[-1]
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "step", "time", "player"]
                   + [f"x_{i}" for i in range(d)] + [f"a_{i}" for i in range(dA)])
        for mi in range(M):
            for s in range(S1):
                for n in range(N):
                    ctrl = (list(map(repr, batch.controls[mi, s, n].tolist()))
                            if s < S1 - 1 else [""] * dA)
                    w.writerow([int(batch.samples[mi]), s, repr(float(batch.grid[s])), n]
                               + list(map(repr, batch.states[mi, s, n].tolist())) + ctrl)
    return path


BATCH_FORMAT_VERSION = 1


def save_batch(batch: ParticleBatch, path) -> Path:
    """Compressed binary dump with a versioned JSON header."""
    header = {"format": "mfc-particle-batch", "version": BATCH_FORMAT_VERSION,
              "shape": list(batch.states.shape), "has_noise_B": batch.noise_B is not None}
    arrays = dict(grid=batch.grid, states=batch.states, controls=batch.controls,
                  noise_W=batch.noise_W, samples=batch.samples)
    if batch.noise_B is not None:
        arrays["noise_B"] = batch.noise_B
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, header=np.array(json.dumps(header)), **arrays)
    return path


def load_batch(path) -> ParticleBatch:
    from .errors import FormatError
    with np.load(path, allow_pickle=False) as data:
        if "header" not in data:
            raise FormatError("header field missing from particle batch")
        header = json.loads(str(data["header"]))
        if header.get("version") != BATCH_FORMAT_VERSION:
            raise FormatError(f"header field 'version' is {header.get('version')!r}")
        return ParticleBatch(
            grid=data["grid"], states=data["states"], controls=data["controls"],
            noise_W=data["noise_W"], noise_B=data["noise_B"] if header["has_noise_B"] else None,
            samples=data["samples"],
        )
