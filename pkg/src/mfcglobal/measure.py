"""Input measures, inverse-transform sampling and quasi-Monte Carlo integration.

The mean-field value at ``(t, mu)`` is recovered from a fitted N-player value
function ``V`` as the integral of ``V(t, x_1, ..., x_N)`` against the product
measure ``mu^N``.  Continuous measures are handled coordinate-wise through
their inverse CDFs, so the integral becomes an expectation over the unit
hypercube of dimension ``N * d`` and can be evaluated with Sobol points.
"""
from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from . import rng
from .errors import CapacityError, DomainError, FormatError

EXACT_ENUMERATION_LIMIT = 10 ** 6


def _vec(v):
    return np.atleast_1d(np.asarray(v, dtype=np.float64))


class Measure:
    """Base class.  ``dim`` is the dimension d of the underlying space."""

    dim: int

    def ppf(self, u):
        """Coordinate-wise inverse CDF, ``u`` of shape ``(..., d)``."""
        raise DomainError(f"{type(self).__name__} has no coordinate-wise inverse CDF")

    def mean(self) -> np.ndarray:
        raise DomainError(f"{type(self).__name__} has no mean")

    def second_moment(self) -> np.ndarray:
        """Per-coordinate ``E[x_i^2]``."""
        raise DomainError(f"{type(self).__name__} has no second moment")

    def to_dict(self) -> dict:
        raise NotImplementedError

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True, eq=False)
class Dirac(Measure):
    point: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "point", _vec(self.point))

    @property
    def dim(self):
        return self.point.size

    def ppf(self, u):
        u = np.asarray(u, dtype=np.float64)
        return np.broadcast_to(self.point, u.shape).copy()

    def mean(self):
        return self.point.copy()

    def second_moment(self):
        return self.point ** 2

    def to_dict(self):
        return {"type": "dirac", "point": self.point.tolist()}


@dataclass(frozen=True, eq=False)
class Uniform(Measure):
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        lo, hi = np.broadcast_arrays(_vec(self.low), _vec(self.high))
        if not np.all(lo < hi):
            raise DomainError("Uniform needs low < high in every coordinate")
        object.__setattr__(self, "low", lo.copy())
        object.__setattr__(self, "high", hi.copy())

    @property
    def dim(self):
        return self.low.size

    def ppf(self, u):
        return self.low + (self.high - self.low) * np.asarray(u, dtype=np.float64)

    def mean(self):
        return 0.5 * (self.low + self.high)

    def second_moment(self):
        a, b = self.low, self.high
        return (a * a + a * b + b * b) / 3.0

    def to_dict(self):
        return {"type": "uniform", "low": self.low.tolist(), "high": self.high.tolist()}


@dataclass(frozen=True, eq=False)
class Gaussian(Measure):
    loc: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        loc, scale = np.broadcast_arrays(_vec(self.loc), _vec(self.scale))
        if not np.all(scale > 0):
            raise DomainError("Gaussian needs std > 0")
        object.__setattr__(self, "loc", loc.copy())
        object.__setattr__(self, "scale", scale.copy())

    @property
    def dim(self):
        return self.loc.size

    def ppf(self, u):
        return self.loc + self.scale * ndtri(np.asarray(u, dtype=np.float64))

    def mean(self):
        return self.loc.copy()

    def second_moment(self):
        return self.loc ** 2 + self.scale ** 2

    def to_dict(self):
        return {"type": "gaussian", "mean": self.loc.tolist(), "std": self.scale.tolist()}


@dataclass(frozen=True, eq=False)
class Product(Measure):
    """Independent one-dimensional marginals stacked into ``R^d``."""

    marginals: tuple

    def __post_init__(self):
        ms = tuple(self.marginals)
        if not ms or any(m.dim != 1 or isinstance(m, Quantized) for m in ms):
            raise DomainError("Product takes one-dimensional continuous or Dirac marginals")
        object.__setattr__(self, "marginals", ms)

    @property
    def dim(self):
        return len(self.marginals)

    def ppf(self, u):
        u = np.asarray(u, dtype=np.float64)
        return np.stack([m.ppf(u[..., i:i + 1])[..., 0] for i, m in enumerate(self.marginals)], axis=-1)

    def mean(self):
        return np.concatenate([m.mean() for m in self.marginals])

    def second_moment(self):
        return np.concatenate([m.second_moment() for m in self.marginals])

    def to_dict(self):
        return {"type": "product", "marginals": [m.to_dict() for m in self.marginals]}


@dataclass(frozen=True, eq=False)
class Quantized(Measure):
    """Finitely supported measure ``sum_l w_l delta_{x_l}``."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = _vec(self.weights)
        if pts.shape[0] != w.size or w.size == 0:
            raise DomainError("need one positive weight per atom")
        if not np.all(w > 0):
            raise DomainError("quantized weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise DomainError(f"quantized weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def n_atoms(self):
        return self.weights.size

    def atom_index(self, u):
        """Generalised inverse over the atoms in storage order."""
        cum = np.cumsum(self.weights)
        cum[-1] = 1.0
        return np.minimum(np.searchsorted(cum, np.asarray(u), side="left"), self.n_atoms - 1)

    def ppf(self, u):
        if self.dim != 1:
            raise DomainError("coordinate-wise inverse CDF needs a one-dimensional quantized measure")
        order = np.argsort(self.points[:, 0], kind="stable")
        pts, w = self.points[order, 0], self.weights[order]
        cum = np.cumsum(w)
        cum[-1] = 1.0
        u = np.asarray(u, dtype=np.float64)
        idx = np.minimum(np.searchsorted(cum, u, side="left"), w.size - 1)
        return pts[idx]

    def mean(self):
        return self.weights @ self.points

    def second_moment(self):
        return self.weights @ self.points ** 2

    def to_dict(self):
        return {"type": "quantized", "points": self.points.tolist(), "weights": self.weights.tolist()}


def measure_from_dict(data: dict) -> Measure:
    try:
        kind = data["type"]
        if kind == "dirac":
            return Dirac(data["point"])
        if kind == "uniform":
            return Uniform(data["low"], data["high"])
        if kind == "gaussian":
            return Gaussian(data["mean"], data["std"])
        if kind == "product":
            return Product(tuple(measure_from_dict(m) for m in data["marginals"]))
        if kind == "quantized":
            return Quantized(data["points"], data["weights"])
    except KeyError as exc:
        raise FormatError(f"measure is missing field {exc.args[0]!r}") from None
    raise FormatError(f"unknown measure type {data.get('type')!r}")


def parse_measure(text: str) -> Measure:
    """Measure from inline JSON or from a path to a JSON file."""
    text = text.strip()
    if not text.startswith("{"):
        text = Path(text).read_text()
    try:
        return measure_from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise FormatError(f"measure is not valid JSON: {exc}") from None


def inverse_cdf(measure: Measure, u: float) -> float:
    """``F^{-1}(u)`` of a one-dimensional measure, ``u`` in (0, 1)."""
    if not 0.0 < u < 1.0:
        raise DomainError(f"u = {u!r} is outside (0, 1)")
    if measure.dim != 1:
        raise DomainError("inverse_cdf needs a one-dimensional measure")
    return float(measure.ppf(np.array([u]))[0])


class SobolStream:
    """Unscrambled Sobol points (Joe-Kuo directions), skipping the origin."""

    CAPACITY = 2 ** 32

    def __init__(self, dim: int):
        if dim < 1:
            raise DomainError("Sobol dimension must be positive")
        self.dim = dim
        self.index = 1
        self._engine = qmc.Sobol(dim, scramble=False, bits=32)
        self._engine.fast_forward(1)

    def next(self, count: int) -> np.ndarray:
        if count < 1:
            raise ValueError("count must be at least 1")
        if self.index + count > self.CAPACITY:
            raise CapacityError(f"Sobol stream exhausted after {self.CAPACITY} points")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            pts = self._engine.random(count)
        self.index += count
        return pts


def sobol_points(stream: SobolStream, count: int) -> np.ndarray:
    return stream.next(count)


def sample_quantized(L: int, box, seed: int) -> Quantized:
    """``L`` uniform atoms in ``box = (lo, hi)`` with normalised Exp(1) weights."""
    if L < 1:
        raise ValueError("L must be at least 1")
    lo, hi = np.broadcast_arrays(_vec(box[0]), _vec(box[1]))
    gen = np.random.default_rng(seed)
    pts = lo + (hi - lo) * gen.random((L, lo.size))
    e = gen.exponential(1.0, L)
    return Quantized(pts, e / e.sum())


@dataclass(frozen=True)
class MeasureSampler:
    """Initial-state sampler drawing every player i.i.d. from ``measure``."""

    measure: Measure
    n_players: int

    def __call__(self, key, samples):
        mu = self.measure
        if isinstance(mu, Quantized):
            u = rng.uniforms(key, samples, rng.INIT_STEP, self.n_players, 1)[..., 0]
            return mu.points[mu.atom_index(u)]
        u = rng.uniforms(key, samples, rng.INIT_STEP, self.n_players, mu.dim)
        return mu.ppf(u)


def _evaluate(value_fn, t, pts, batch):
    out = []
    for i in range(0, len(pts), batch):
        v = np.asarray(value_fn(t, pts[i:i + batch]), dtype=np.float64)
        out.append(v.reshape(v.shape[0], -1)[:, 0])
    return np.concatenate(out)


def integrate_value(value_fn, t: float, mu: Measure, N: int, n_points: int = 4096,
                    mode: str = "sobol", seed: int = 0, batch: int = 8192) -> float:
    """Integral of ``value_fn(t, x_1..x_N)`` against ``mu^N``.

    ``value_fn(t, X)`` takes ``X`` of shape ``(B, N*d)``.  Quantized measures
    with at most 10**6 atom combinations are integrated exactly by
    enumeration; otherwise the atoms of each player are drawn by inverse
    transform of uniform (Sobol or pseudo-random) coordinates.
    """
    if mode not in ("sobol", "pseudo"):
        raise ValueError(f"unknown mode {mode!r}")
    d = mu.dim
    if isinstance(mu, Quantized):
        L = mu.n_atoms
        if L ** N <= EXACT_ENUMERATION_LIMIT:
            total = 0.0
            combos = itertools.product(range(L), repeat=N)
            while True:
                chunk = np.array(list(itertools.islice(combos, batch)), dtype=np.int64)
                if chunk.size == 0:
                    break
                w = np.prod(mu.weights[chunk], axis=1)
                pts = mu.points[chunk].reshape(len(chunk), N * d)
                total += float(w @ _evaluate(value_fn, t, pts, batch))
            return total
        u = _uniforms(N, n_points, mode, seed)
        pts = mu.points[mu.atom_index(u)].reshape(n_points, N * d)
    else:
        u = _uniforms(N * d, n_points, mode, seed).reshape(n_points, N, d)
        pts = mu.ppf(u).reshape(n_points, N * d)
    return float(np.mean(_evaluate(value_fn, t, pts, batch)))


def _uniforms(dim, n, mode, seed):
    if mode == "sobol":
        return SobolStream(dim).next(n)
    return np.random.default_rng(seed).random((n, dim))
