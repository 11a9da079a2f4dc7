"""Evaluation metrics: residual loss against a known value and HJB residual.

Value functions are callables ``value_fn(t, X)`` on a batch ``X`` of shape
``(B, N*d)`` with ``t`` a scalar or one time per row, built from
:mod:`mfcglobal.autodiff` operations (fitted networks and the closed-form
surrogates in :mod:`mfcglobal.bench` both qualify).  First derivatives come
from a reverse sweep; Hessians from central differences of that gradient.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import measure as ms
from . import network as nw
from . import rng
from .dynamics import EmpiricalMeasure, ProblemSpec
from .errors import DimensionError, NumericError


def as_value_fn(v):
    """Wrap a :class:`~mfcglobal.network.Network` so it returns shape ``(B,)``."""
    if isinstance(v, nw.Network):
        if v.config.output_dim != 1:
            raise DimensionError("value networks have one output")
        params, config = v.params, v.config
        return lambda t, x: nw.forward(params, config, t, x)[:, 0]
    return v


def value_gradients(value_fn, t, x):
    """``(v, dv/dt, dv/dx)`` for a batch, by one reverse sweep.

    Rows do not interact, so seeding the sum of the outputs yields every
    row's gradient at once.
    """
    value_fn = as_value_fn(value_fn)
    x = np.asarray(x, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],)).copy()
    tape = ad.Tape()
    tv, xv = tape.var(t), tape.var(x)
    out = value_fn(tv, xv)
    if not ad.is_var(out):
        return np.asarray(out, dtype=np.float64).reshape(-1), np.zeros_like(t), np.zeros_like(x)
    out = ad.reshape(out, (x.shape[0],))
    gt, gx = ad.backward_grad(tape, ad.sum(out), [tv, xv])
    if not (np.all(np.isfinite(gt)) and np.all(np.isfinite(gx))):
        raise NumericError("non-finite value derivatives")
    return out.value, gt, gx


def value_hessian(value_fn, t, x, h: float = 1e-4):
    """``(B, D, D)`` Hessians by central differences of the gradient."""
    x = np.asarray(x, dtype=np.float64)
    B, D = x.shape
    hess = np.empty((B, D, D))
    for i in range(D):
        e = np.zeros(D)
        e[i] = h
        _, _, gp = value_gradients(value_fn, t, x + e)
        _, _, gm = value_gradients(value_fn, t, x - e)
        hess[:, :, i] = (gp - gm) / (2 * h)
    return 0.5 * (hess + np.swapaxes(hess, 1, 2))


def hamiltonian(t, x, p, M, spec: ProblemSpec, policy, N: int, controls=None,
                common_noise: bool = False):
    """``sum_n <b^n, p^n> + 1/2 sum_{n,n'} tr(sigma^n sigma^{n'T} M_{n',n}) + (1/N) sum_n f^n``.

    ``sigma^n`` is player n's loading on the full noise vector.  With
    independent Brownian motions per player (as simulated) the loadings of
    different players are orthogonal, so only the diagonal blocks
    ``M_{n,n}`` enter, together with ``eps^2/2 tr M_{n,n}`` from the
    regularising noise.

    Parameters
    ----------
    x, p : array, shape (B, N*d) or (N*d,)
    M : array, shape (B, N*d, N*d) or (N*d, N*d)
    policy : callable
        ``(t, x_flat) -> (B, N*d_A)``; ignored when ``controls`` is given.
    common_noise : bool
        Treat ``W`` as one Brownian motion shared by all players, which
        brings in the off-diagonal player blocks.

    Returns
    -------
    ndarray, shape (B,), or float for unbatched input.
    """
    x, p, M = (np.asarray(a, dtype=np.float64) for a in (x, p, M))
    single = x.ndim == 1
    if single:
        x, p, M = x[None], p[None], M[None]
    B, D = x.shape
    d = spec.d
    if D != N * d or p.shape != (B, D) or M.shape != (B, D, D):
        raise DimensionError(f"need x, p of length {N * d} and M of shape ({N * d}, {N * d})")
    xs = x.reshape(B, N, d)
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (B, 1)) if np.ndim(t) else t
    if controls is None:
        controls = policy(tt, x)
    a = np.asarray(ad.value_of(controls), dtype=np.float64).reshape(B, N, spec.d_A)
    emp = EmpiricalMeasure(xs, a)
    b = np.broadcast_to(ad.value_of(spec.drift(tt, xs, a, emp)), (B, N, d))
    sig = np.broadcast_to(ad.value_of(spec.diffusion(tt, xs, a, emp)), (B, N, d, spec.m))
    f = np.broadcast_to(ad.value_of(spec.running_cost(tt, xs, a, emp)), (B, N))
    first = np.einsum("bnd,bnd->b", b, p.reshape(B, N, d))
    Mr = M.reshape(B, N, d, N, d)
    diag = np.einsum("bnjni->bnji", Mr)
    if common_noise:
        second = 0.5 * np.einsum("bnik,bqjk,bqjni->b", sig, sig, Mr)
    else:
        second = 0.5 * np.einsum("bnik,bnjk,bnji->b", sig, sig, diag)
    if spec.epsilon > 0:
        second = second + 0.5 * spec.epsilon ** 2 * np.einsum("bnii->b", diag)
    out = first + second + f.mean(axis=1)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class HJBGrid:
    """Times (including 0 and T) and spatial probes of shape ``(P, N*d)``."""

    times: np.ndarray
    probes: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        probes = np.atleast_2d(np.asarray(self.probes, dtype=np.float64))
        if times.size < 2 or times[0] != 0.0:
            raise ValueError("time grid must start at 0 and include T")
        if probes.shape[0] < 1:
            raise ValueError("need at least one probe")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "probes", probes)

    @classmethod
    def random(cls, box, n_probes: int, state_dim: int, T: float, dt: float, seed: int):
        """Uniform random probes in ``box^{state_dim}`` (the default mode)."""
        lo, hi = box
        gen = np.random.default_rng(seed)
        probes = lo + (hi - lo) * gen.random((n_probes, state_dim))
        return cls(_time_grid(T, dt), probes)

    @classmethod
    def lattice(cls, box, dx: float, state_dim: int, T: float, dt: float):
        """Regular lattice with spacing ``dx``; only for ``state_dim <= 3``."""
        if state_dim > 3:
            raise ValueError("lattice probes are limited to N*d <= 3")
        lo, hi = box
        axis = np.arange(lo, hi + 0.5 * dx, dx)
        mesh = np.meshgrid(*([axis] * state_dim), indexing="ij")
        return cls(_time_grid(T, dt), np.stack([m.ravel() for m in mesh], axis=1))

    @property
    def T(self):
        return float(self.times[-1])


def _time_grid(T, dt):
    n = int(round(T / dt))
    return np.linspace(0.0, T, n + 1)


def hjb_residuals(value_fn, spec: ProblemSpec, policy, grid: HJBGrid, N: int,
                  fd_step: float = 1e-4, common_noise: bool = False, chunk: int = 8192,
                  policy_from_gradient=None):
    """Interior residuals ``d_t v + H`` (shape ``(len(times), P)``) and terminal defects.

    ``policy_from_gradient(t, x, dv_dx)``, when given, supplies the control
    instead of ``policy``; this is how the infimum of the Hamiltonian is
    substituted for a known value function.
    """
    times, probes = grid.times, grid.probes
    P, D = probes.shape
    tt = np.repeat(times, P)
    xx = np.tile(probes, (len(times), 1))
    res = np.empty(tt.size)
    for i in range(0, tt.size, chunk):
        t, x = tt[i:i + chunk], xx[i:i + chunk]
        _, dt, dx = value_gradients(value_fn, t, x)
        hess = value_hessian(value_fn, t, x, fd_step)
        controls = policy_from_gradient(t, x, dx) if policy_from_gradient is not None else None
        res[i:i + chunk] = dt + hamiltonian(t, x, dx, hess, spec, policy, N,
                                            controls=controls, common_noise=common_noise)
    vT = np.asarray(as_value_fn(value_fn)(np.full(P, grid.T), probes), dtype=np.float64).reshape(-1)
    xs = probes.reshape(P, N, spec.d)
    gT = np.asarray(ad.value_of(spec.terminal_cost(xs, EmpiricalMeasure(xs))), dtype=np.float64)
    gT = np.broadcast_to(gT, (P, N)).mean(axis=1)
    if not (np.all(np.isfinite(res)) and np.all(np.isfinite(vT))):
        raise NumericError("non-finite HJB residual")
    return res.reshape(len(times), P), vT - gT


def hjb_loss(value_fn, spec: ProblemSpec, policy, grid: HJBGrid, N: int,
             fd_step: float = 1e-4, common_noise: bool = False, policy_from_gradient=None) -> float:
    """Mean squared interior residual plus mean squared terminal defect."""
    res, term = hjb_residuals(value_fn, spec, policy, grid, N, fd_step, common_noise,
                              policy_from_gradient=policy_from_gradient)
    return float(np.mean(res ** 2) + np.mean(term ** 2))


def residual_loss(v_exact, value_fn, t: float, P: int, L: int, box, N: int, seed: int,
                  n_points: int = 4096, mode: str = "sobol") -> float:
    """``(1/P) sum_p |v_exact(t, mu_p) - I_N(value_fn, t, mu_p)|^2`` over random quantized measures."""
    if P < 1 or L < 1:
        raise ValueError("P and L must be at least 1")
    value_fn = as_value_fn(value_fn)
    errs = np.empty(P)
    for p in range(P):
        mu = ms.sample_quantized(L, box, rng.derive_key(seed, "measure", p))
        approx = ms.integrate_value(value_fn, t, mu, N, n_points=n_points, mode=mode, seed=p)
        errs[p] = v_exact(t, mu) - approx
    return float(np.mean(errs ** 2))


def write_report(path, report: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def metrics_report(value_fn, spec, policy, N, *, v_exact=None, t=0.0, P=200, L=4, box=(-2.0, 2.0),
                   n_probes=1024, dt=0.01, seed=0, n_points=4096, common_noise=False) -> dict:
    """Residual and HJB losses with their settings and wall times."""
    out = {"seeds": {"metrics": seed}, "probe_counts": {"hjb_probes": n_probes, "residual_measures": P}}
    if v_exact is not None:
        t0 = time.perf_counter()
        out["residual_loss"] = residual_loss(v_exact, value_fn, t, P, L, box, N, seed, n_points)
        out["wall_time_residual"] = time.perf_counter() - t0
    else:
        out["residual_loss"] = None
    grid = HJBGrid.random(box, n_probes, N * spec.d, spec.T, dt, rng.derive_key(seed, "probes") % 2 ** 32)
    t0 = time.perf_counter()
    out["hjb_loss"] = hjb_loss(value_fn, spec, policy, grid, N, common_noise=common_noise)
    out["wall_time_hjb"] = time.perf_counter() - t0
    return out
