"""Value samples of the N-player problem and differential regression.

A value sample at ``(t_k, x_k)`` is the average cost of ``M`` rollouts of the
trained control started from ``x_k`` at grid time ``t_k``.  Its derivatives
are pathwise: the rollouts are recorded on a tape with ``(t_k, x_k)`` as
inputs and the Brownian draws held fixed.  For the time derivative the
number of remaining steps is held fixed and the step length
``h = (T - t) / n`` becomes a function of ``t``.  At ``t = T`` no step is
left, and the time derivative of the one-step problem started at ``T - dt``
is used instead.
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
from .dynamics import EmpiricalMeasure, ProblemSpec, UniformBoxSampler, rollout
from .errors import Diverged, NumericError
from .policy import make_optimizer

log = logging.getLogger(__name__)


@dataclass
class ValueSample:
    t: float
    x: np.ndarray
    y: float
    dy_dt: float = np.nan
    dy_dx: np.ndarray | None = None


@dataclass
class ValueSamples:
    """A batch of ``K`` value samples stored column-wise."""

    t: np.ndarray       # (K,)
    x: np.ndarray       # (K, N*d)
    y: np.ndarray       # (K,)
    dy_dt: np.ndarray | None = None
    dy_dx: np.ndarray | None = None

    def __len__(self):
        return self.t.size

    def __getitem__(self, k) -> ValueSample:
        return ValueSample(float(self.t[k]), self.x[k], float(self.y[k]),
                           np.nan if self.dy_dt is None else float(self.dy_dt[k]),
                           None if self.dy_dx is None else self.dy_dx[k])

    @classmethod
    def stack(cls, samples):
        samples = list(samples)
        with_der = all(s.dy_dx is not None for s in samples)
        return cls(np.array([s.t for s in samples]), np.array([s.x for s in samples]),
                   np.array([s.y for s in samples]),
                   np.array([s.dy_dt for s in samples]) if with_der else None,
                   np.array([s.dy_dx for s in samples]) if with_der else None)

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        cat = lambda name: (None if getattr(parts[0], name) is None
                            else np.concatenate([getattr(p, name) for p in parts]))
        return cls(cat("t"), cat("x"), cat("y"), cat("dy_dt"), cat("dy_dx"))


@dataclass
class RegressionConfig:
    samples_per_epoch: int = 256
    learning_rate: float = 1e-3
    w_val: float = 1.0
    w_der: float = 1.0
    patience: int = 50
    max_iters: int = 500
    rollouts: int = 64
    dt: float = 0.01
    seed: int = 0
    steps_per_epoch: int = 1
    validation_size: int = 0
    tol: float = 1e-7
    optimizer: str = "adam"

    def __post_init__(self):
        if self.w_val <= 0 or self.w_der < 0:
            raise ValueError("need w_val > 0 and w_der >= 0")
        if self.samples_per_epoch < 1 or self.rollouts < 1 or self.patience < 1:
            raise ValueError("samples_per_epoch, rollouts and patience must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def _grid_index(t, dt, S):
    idx = np.rint(np.asarray(t, dtype=np.float64) / dt).astype(np.int64)
    if np.any(np.abs(idx * dt - t) > 1e-9) or np.any(idx < 0) or np.any(idx > S):
        raise ValueError("value samples need grid times in [0, T]")
    return idx


def _terminal_mean(spec, x):
    return ad.mean(spec.terminal_cost(x, EmpiricalMeasure(x)), axis=-1)


def _interior(spec, policy, t, x, idx, M, dt, key, ids, with_derivatives):
    """Samples at interior grid times; ``ids`` are the first sample ids per row."""
    K, D = x.shape
    N = D // spec.d
    S = spec.n_steps(dt)
    rows = (ids[:, None] + np.arange(M)[None, :]).ravel()
    start = np.repeat(idx, M)
    if not with_derivatives:
        x0 = np.repeat(x, M, axis=0).reshape(K * M, N, spec.d)
        res = rollout(spec, policy, x0, key, rows, dt, start=start)
        return np.asarray(res.sample_costs()).reshape(K, M).mean(axis=1), None, None
    tape = ad.Tape()
    tv, xv = tape.var(t), tape.var(x)
    x0 = ad.reshape(ad.broadcast_to(ad.reshape(xv, (K, 1, D)), (K, M, D)), (K * M, N, spec.d))
    t0 = ad.reshape(ad.broadcast_to(ad.reshape(tv, (K, 1)), (K, M)), (K * M, 1))
    n_left = np.repeat((S - idx).astype(np.float64), M)[:, None]
    h = (spec.T - t0) / n_left
    res = rollout(spec, policy, x0, key, rows, dt, start=start, t0=t0, h=h)
    y = ad.mean(ad.reshape(res.sample_costs(), (K, M)), axis=1)
    gt, gx = ad.backward_grad(tape, ad.sum(y), [tv, xv])
    return y.value, gt, gx


def value_samples(spec: ProblemSpec, policy, t, x, M: int, dt: float, seed: int,
                  with_derivatives: bool = True, sample_offset: int = 0,
                  chunk_rows: int = 2048, chunk_elems: int = 2 ** 15) -> ValueSamples:
    """Value samples (and pathwise derivatives) at grid times ``t`` and states ``x``.

    Row ``k`` uses Brownian sample ids ``sample_offset + k*M ... + M - 1``,
    so re-running with the same arguments, or with a perturbed ``x``,
    reuses the same draws.  ``policy`` is held fixed.

    Rollouts are taped in chunks of at most ``chunk_rows`` rollouts and
    ``chunk_elems`` state entries per time step, which bounds the tape's
    memory for many players.  Chunking does not change the results.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    K, D = x.shape
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (K,)).copy()
    S = spec.n_steps(dt)
    idx = _grid_index(t, dt, S)
    key = rng.derive_key(seed, "value")
    ids = sample_offset + np.arange(K) * M
    y = np.empty(K)
    dy_dt = np.empty(K) if with_derivatives else None
    dy_dx = np.empty((K, D)) if with_derivatives else None

    inner = np.flatnonzero(idx < S)
    per = max(1, min(chunk_rows, chunk_elems // D) // M)
    for i in range(0, inner.size, per):
        sel = inner[i:i + per]
        yy, gt, gx = _interior(spec, policy, t[sel], x[sel], idx[sel], M, dt, key, ids[sel], with_derivatives)
        y[sel] = yy
        if with_derivatives:
            dy_dt[sel], dy_dx[sel] = gt, gx

    term = np.flatnonzero(idx == S)
    if term.size:
        xs = x[term].reshape(term.size, D // spec.d, spec.d)
        if with_derivatives:
            tape = ad.Tape()
            xv = tape.var(xs)
            g = _terminal_mean(spec, xv)
            if ad.is_var(g):
                (gx,) = ad.backward_grad(tape, ad.sum(g), [xv])
                y[term] = g.value
            else:
                gx = np.zeros_like(xs)
                y[term] = np.asarray(g)
            dy_dx[term] = gx.reshape(term.size, D)
            # pathwise time derivative of the one-step problem started at T - dt
            _, gt, _ = _interior(spec, policy, t[term] - dt, x[term], idx[term] - 1, M, dt, key,
                                 ids[term], True)
            dy_dt[term] = gt
        else:
            y[term] = np.asarray(ad.value_of(_terminal_mean(spec, xs)))
    out = ValueSamples(t, x, y, dy_dt, dy_dx)
    for name in ("y", "dy_dt", "dy_dx"):
        arr = getattr(out, name)
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite {name} in value samples")
    return out


def value_sample(spec: ProblemSpec, policy, t: float, x, M: int, dt: float, seed: int,
                 with_derivatives: bool = True) -> ValueSample:
    """Single value sample; see :func:`value_samples`."""
    return value_samples(spec, policy, [t], np.asarray(x, dtype=np.float64)[None], M, dt, seed,
                         with_derivatives)[0]


# -- regression -----------------------------------------------------------------

def value_network_config(n_players: int, d: int, **overrides) -> nw.MLPConfig:
    return nw.MLPConfig(**{"state_dim": n_players * d, "output_dim": 1, **overrides})


def _loss_expr(params, config, samples: ValueSamples, w_val, w_der):
    v, vt, vx = nw.forward_with_input_grads(params, config, samples.t, samples.x)
    err = v - samples.y
    loss = w_val * ad.mean(err * err)
    if w_der > 0:
        if samples.dy_dx is None:
            raise ValueError("derivative weight needs samples with derivatives")
        ex = vx - samples.dy_dx
        et = vt - samples.dy_dt
        loss = loss + w_der * (ad.mean(ad.sum(ex * ex, axis=1)) + ad.mean(et * et))
    return loss


def differential_loss(eta, config: nw.MLPConfig, samples, w_val: float = 1.0, w_der: float = 1.0) -> float:
    """``(1/K) sum_k w_val |v - y|^2 + w_der (|grad_x v - grad_x y|^2 + |d_t v - d_t y|^2)``."""
    if not isinstance(samples, ValueSamples):
        samples = ValueSamples.stack(samples)
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    return float(ad.value_of(_loss_expr(np.asarray(eta), config, samples, w_val, w_der)))


def differential_loss_grad(eta, config, samples: ValueSamples, w_val=1.0, w_der=1.0):
    tape = ad.Tape()
    p = tape.var(eta)
    loss = _loss_expr(p, config, samples, w_val, w_der)
    (g,) = ad.backward_grad(tape, loss, [p])
    return float(loss.value), g


@dataclass
class ValueFitState:
    eta: np.ndarray
    best_eta: np.ndarray
    best_loss: float = np.inf
    iterations: int = 0
    history: list = field(default_factory=list)


def draw_value_inputs(spec: ProblemSpec, n_players: int, K: int, dt: float, key: int,
                      x_sampler=None, box=(-1.0, 1.0)):
    """Grid times uniform over ``{0, dt, ..., T}`` and states from ``x_sampler``."""
    S = spec.n_steps(dt)
    u = rng.uniforms(rng.derive_key(key, "time"), np.arange(K), 0, 1, 1)[:, 0, 0]
    t = np.minimum(np.floor(u * (S + 1)), S) * dt
    sampler = x_sampler or UniformBoxSampler((box[0],) * spec.d, (box[1],) * spec.d, n_players)
    x = np.asarray(sampler(rng.derive_key(key, "state"), np.arange(K)), dtype=np.float64)
    return t, x.reshape(K, n_players * spec.d)


def fit_value(spec: ProblemSpec, policy, n_players: int, config: RegressionConfig, sampling_box=(-1.0, 1.0),
              net_config: nw.MLPConfig | None = None, eta0=None, x_sampler=None, out_dir=None):
    """Differential regression of the N-player value with patience stopping.

    Each epoch draws fresh ``(t_k, x_k)``, generates value samples with the
    fixed control ``policy`` and takes ``steps_per_epoch`` optimizer steps on
    ``L_w``.  Progress is scored on a fixed validation set when
    ``validation_size > 0``, otherwise on the epoch loss.  Returns
    ``(best_eta, state)``.
    """
    net_config = net_config or value_network_config(n_players, spec.d)
    eta = nw.init_params(net_config, config.seed) if eta0 is None else np.array(eta0, dtype=np.float64)
    opt = make_optimizer(config.optimizer, config.learning_rate)
    state = ValueFitState(eta=eta, best_eta=eta.copy())
    base = rng.derive_key(config.seed, "valuefit")
    with_der = config.w_der > 0
    gen = lambda key, K: value_samples(
        spec, policy, *draw_value_inputs(spec, n_players, K, config.dt, key, x_sampler, sampling_box),
        config.rollouts, config.dt, rng.derive_key(key, "paths"), with_der)
    val = gen(rng.derive_key(base, "validation"), config.validation_size) if config.validation_size else None
    start = time.perf_counter()
    initial = None
    wait = 0
    while state.iterations < config.max_iters and wait < config.patience:
        samples = gen(rng.derive_key(base, "epoch", state.iterations), config.samples_per_epoch)
        for _ in range(config.steps_per_epoch):
            loss, g = differential_loss_grad(eta, net_config, samples, config.w_val, config.w_der)
            eta = opt.step(eta, g)
        score = (differential_loss(eta, net_config, val, config.w_val, config.w_der) if val is not None
                 else differential_loss(eta, net_config, samples, config.w_val, config.w_der))
        initial = score if initial is None else initial
        if not np.isfinite(score) or score > 1e6 * max(abs(initial), 1e-8):
            raise Diverged(f"regression loss {score!r} at epoch {state.iterations}")
        state.iterations += 1
        state.history.append(dict(iter=state.iterations, loss=score, train_loss=loss,
                                   wall_time=time.perf_counter() - start))
        if score < state.best_loss - config.tol:
            state.best_loss, state.best_eta, wait = score, eta.copy(), 0
        else:
            wait += 1
        if state.iterations % 25 == 0:
            log.info("value epoch %d loss %.6g best %.6g", state.iterations, score, state.best_loss)
    state.eta = eta
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "value_history.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["iter", "loss", "train_loss", "wall_time"])
            w.writeheader()
            w.writerows(state.history)
        nw.save_checkpoint(out / "value.mfcnet", state.best_eta, net_config, config.seed)
    return state.best_eta, state


# -- persistence ----------------------------------------------------------------

def write_samples_csv(samples: ValueSamples, path) -> Path:
    """Columns ``t, x_0.., y, dy_dt, dy_dx_0..`` (derivative columns empty if absent)."""
    K, D = samples.x.shape
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x_{i}" for i in range(D)] + ["y", "dy_dt"] + [f"dy_dx_{i}" for i in range(D)])
        for k in range(K):
            der = ([repr(float(samples.dy_dt[k]))] + [repr(float(v)) for v in samples.dy_dx[k]]
                   if samples.dy_dx is not None else [""] * (D + 1))
            w.writerow([repr(float(samples.t[k]))] + [repr(float(v)) for v in samples.x[k]]
                       + [repr(float(samples.y[k]))] + der)
    return path


def read_samples_csv(path) -> ValueSamples:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    D = sum(1 for h in header if h.startswith("x_"))
    t = np.array([float(r[0]) for r in body])
    x = np.array([[float(v) for v in r[1:1 + D]] for r in body]).reshape(len(body), D)
    y = np.array([float(r[1 + D]) for r in body])
    if body and body[0][2 + D] != "":
        dt = np.array([float(r[2 + D]) for r in body])
        dx = np.array([[float(v) for v in r[3 + D:]] for r in body])
        return ValueSamples(t, x, y, dt, dx)
    return ValueSamples(t, x, y)
