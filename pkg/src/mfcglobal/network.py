"""Feedforward networks for controls and value surrogates.

The architecture has three sub-networks, each with one hidden layer: a time
branch fed with ``t``, a state branch fed with the flattened particle vector,
and a final branch applied to the concatenation of both branch outputs::

    u_t = act(act(t W1 + b1) W2 + b2)            time branch, width ceil(H/2)
    u_x = act(act(x W1 + b1) W2 + b2)            state branch, width ceil(H/2)
    out = transform(act([u_t, u_x] W1 + b1) W2 + b2)

Parameters live in one flat float64 vector; :func:`layout` maps its segments
to the individual weight matrices and biases.  Weight matrices are stored in
``(fan_in, fan_out)`` orientation so that layers act on row vectors.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, FormatError

ACTIVATIONS = ("tanh", "relu")
OUTPUT_TRANSFORMS = ("identity", "sigmoid", "affine-sigmoid")
MAGIC = "mfcnet"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class MLPConfig:
    """Shape and pre/post-processing of one network.

    ``state_dim`` is N*d.  ``hidden_width`` defaults to ``10 + state_dim``.
    Inputs are standardised as ``(x - state_shift) / state_scale`` and
    ``t / time_scale`` before the first layer; the shift/scale tuples have
    length 1, d or N*d and are tiled.  For the identity transform the raw
    output is mapped to ``output_shift + output_scale * z``; the
    affine-sigmoid transform maps to ``lo + (hi - lo) * sigmoid(z)``.
    """

    state_dim: int
    output_dim: int = 1
    hidden_width: int | None = None
    activation: str = "tanh"
    output_transform: str = "identity"
    output_bounds: tuple = (0.0, 1.0)
    state_shift: tuple = (0.0,)
    state_scale: tuple = (1.0,)
    time_scale: float = 1.0
    output_shift: float = 0.0
    output_scale: float = 1.0

    def __post_init__(self):
        if self.hidden_width is None:
            object.__setattr__(self, "hidden_width", 10 + self.state_dim)
        for name in ("state_shift", "state_scale", "output_bounds"):
            object.__setattr__(self, name, tuple(float(v) for v in np.atleast_1d(getattr(self, name))))
        if self.state_dim < 1 or self.output_dim < 1 or self.hidden_width < 1:
            raise DimensionError("state_dim, output_dim and hidden_width must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_transform not in OUTPUT_TRANSFORMS:
            raise ValueError(f"unknown output transform {self.output_transform!r}")
        lo, hi = self.output_bounds
        if not lo < hi:
            raise ValueError("output_bounds must satisfy lo < hi")
        for name in ("state_shift", "state_scale"):
            n = len(getattr(self, name))
            if self.state_dim % n:
                raise DimensionError(f"{name} length {n} does not divide state_dim")
        if any(s <= 0 for s in self.state_scale) or self.time_scale <= 0:
            raise ValueError("input scales must be positive")

    @property
    def branch_width(self) -> int:
        return math.ceil(self.hidden_width / 2)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MLPConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise FormatError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**data)


class Slot(NamedTuple):
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def layout(config: MLPConfig) -> list[Slot]:
    """Segments of the flat parameter vector, in storage order."""
    H, Hc = config.hidden_width, config.branch_width
    shapes = [
        ("time.W1", (1, H)), ("time.b1", (H,)), ("time.W2", (H, Hc)), ("time.b2", (Hc,)),
        ("state.W1", (config.state_dim, H)), ("state.b1", (H,)),
        ("state.W2", (H, Hc)), ("state.b2", (Hc,)),
        ("final.W1", (2 * Hc, H)), ("final.b1", (H,)),
        ("final.W2", (H, config.output_dim)), ("final.b2", (config.output_dim,)),
    ]
    slots, offset = [], 0
    for name, shape in shapes:
        slots.append(Slot(name, shape, offset))
        offset += int(np.prod(shape))
    return slots


def n_params(config: MLPConfig) -> int:
    last = layout(config)[-1]
    return last.offset + last.size


def unflatten(params, config: MLPConfig) -> dict:
    """Split a flat parameter vector (array or tape Var) into named blocks."""
    if params.shape != (n_params(config),):
        raise DimensionError(f"expected {n_params(config)} parameters, got shape {params.shape}")
    return {s.name: ad.reshape(params[s.offset:s.offset + s.size], s.shape)
            for s in layout(config)}


def flatten(blocks: dict, config: MLPConfig) -> np.ndarray:
    return np.concatenate([np.asarray(blocks[s.name], dtype=np.float64).ravel()
                           for s in layout(config)])


def init_params(config: MLPConfig, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(n_params(config))
    for s in layout(config):
        if ".W" in s.name:
            fan_in, fan_out = s.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            theta[s.offset:s.offset + s.size] = rng.uniform(-bound, bound, s.size)
    return theta


def _activation(name):
    return ad.tanh if name == "tanh" else ad.relu


def _activation_slope(name, h):
    hv = ad.value_of(h)
    if name == "relu":
        return (hv > 0).astype(np.float64)
    return 1.0 - h * h


def _inputs(config, t, x):
    xv = ad.value_of(x)
    if xv.shape[-1] != config.state_dim:
        raise DimensionError(f"state has length {xv.shape[-1]}, network expects {config.state_dim}")
    single = xv.ndim == 1
    if single:
        x = ad.reshape(x, (1, config.state_dim))
    batch = ad.value_of(x).shape[0]
    tv = ad.value_of(t)
    if tv.size == 1 and batch != 1 or tv.ndim == 0:
        t = ad.broadcast_to(ad.reshape(t, (1, 1)), (batch, 1))
    elif tv.ndim == 1:
        t = ad.reshape(t, (tv.shape[0], 1))
    reps = config.state_dim // len(config.state_shift)
    shift = np.tile(config.state_shift, reps)
    reps = config.state_dim // len(config.state_scale)
    scale = np.tile(config.state_scale, reps)
    return single, t * (1.0 / config.time_scale), (x - shift) * (1.0 / scale), scale


def _hidden(blocks, config, tn, xn):
    act = _activation(config.activation)
    ht = act(tn @ blocks["time.W1"] + blocks["time.b1"])
    ut = act(ht @ blocks["time.W2"] + blocks["time.b2"])
    hx = act(xn @ blocks["state.W1"] + blocks["state.b1"])
    ux = act(hx @ blocks["state.W2"] + blocks["state.b2"])
    hf = act(ad.concatenate([ut, ux], axis=-1) @ blocks["final.W1"] + blocks["final.b1"])
    z = hf @ blocks["final.W2"] + blocks["final.b2"]
    return (ht, ut, hx, ux, hf), z


def _transform(config, z):
    if config.output_transform == "sigmoid":
        s = ad.sigmoid(z)
        return s, s * (1.0 - s)
    if config.output_transform == "affine-sigmoid":
        lo, hi = config.output_bounds
        s = ad.sigmoid(z)
        return lo + (hi - lo) * s, (hi - lo) * s * (1.0 - s)
    return config.output_shift + config.output_scale * z, config.output_scale


class Traced(NamedTuple):
    output: ad.Var
    params: ad.Var
    t: ad.Var
    x: ad.Var


def forward(params, config: MLPConfig, t, x, tape: ad.Tape | None = None):
    """Evaluate the network at time(s) ``t`` and state(s) ``x``.

    ``x`` has shape ``(N*d,)`` or ``(batch, N*d)``; ``t`` is a scalar or has one
    entry per batch row.  Any argument may already be a tape variable.  When
    ``tape`` is given, plain array arguments are first registered on it and a
    :class:`Traced` tuple exposing the leaves is returned.
    """
    if tape is not None:
        leaves = [a if ad.is_var(a) else tape.var(a) for a in (params, t, x)]
        return Traced(forward(*leaves[:1], config, *leaves[1:]), *leaves)
    single, tn, xn, _ = _inputs(config, t, x)
    blocks = unflatten(params, config)
    _, z = _hidden(blocks, config, tn, xn)
    out, _ = _transform(config, z)
    return out[0] if single else out


def forward_with_input_grads(params, config: MLPConfig, t, x):
    """Scalar-output network value with its time and state derivatives.

    Returns ``(v, dv_dt, dv_dx)`` with shapes ``(B,)``, ``(B,)`` and
    ``(B, N*d)``.  The derivatives are assembled from tape operations, so the
    result remains differentiable with respect to ``params``.
    """
    if config.output_dim != 1:
        raise DimensionError("input gradients are defined for scalar-output networks")
    single, tn, xn, scale = _inputs(config, t, x)
    blocks = unflatten(params, config)
    (ht, ut, hx, ux, hf), z = _hidden(blocks, config, tn, xn)
    out, slope = _transform(config, z)
    name = config.activation
    Hc = config.branch_width
    g = (slope * ad.transpose(blocks["final.W2"])) * _activation_slope(name, hf)
    gc = g @ ad.transpose(blocks["final.W1"])
    gt = (gc[:, :Hc] * _activation_slope(name, ut)) @ ad.transpose(blocks["time.W2"])
    dt = (gt * _activation_slope(name, ht)) @ ad.transpose(blocks["time.W1"])
    gx = (gc[:, Hc:] * _activation_slope(name, ux)) @ ad.transpose(blocks["state.W2"])
    dx = (gx * _activation_slope(name, hx)) @ ad.transpose(blocks["state.W1"])
    v = out[:, 0]
    dt = dt[:, 0] * (1.0 / config.time_scale)
    dx = dx * (1.0 / scale)
    if single:
        return v[0], dt[0], dx[0]
    return v, dt, dx


class Network:
    """A parameter vector bound to its config; callable on numpy inputs."""

    def __init__(self, config: MLPConfig, params: np.ndarray):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n_params(config),):
            raise DimensionError("parameter vector does not match config")
        self.config = config
        self.params = params

    def __call__(self, t, x):
        return forward(self.params, self.config, t, x)

    def value_and_grads(self, t, x):
        return forward_with_input_grads(self.params, self.config, t, x)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, params, config: MLPConfig, seed: int | None = None,
                    meta: dict | None = None) -> Path:
    """Write a ``.mfcnet`` file: one JSON header line, then raw ``<f8`` params."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (n_params(config),):
        raise DimensionError("parameter vector does not match config")
    header = {
        "format": MAGIC,
        "version": FORMAT_VERSION,
        "config": config.to_dict(),
        "seed": seed,
        "layout": [{"name": s.name, "shape": list(s.shape), "offset": s.offset}
                   for s in layout(config)],
        "n_params": int(params.size),
        "dtype": "<f8",
        "meta": meta or {},
    }
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(params.astype("<f8").tobytes())
    return path


def load_checkpoint(path):
    """Read a ``.mfcnet`` file; returns ``(params, config, header)``."""
    raw = Path(path).read_bytes()
    line, sep, body = raw.partition(b"\n")
    if not sep:
        raise FormatError("missing header terminator")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("header is not a JSON object")
    for key in ("format", "version", "config", "layout", "n_params", "dtype"):
        if key not in header:
            raise FormatError(f"header field {key!r} is missing")
    if header["format"] != MAGIC:
        raise FormatError(f"header field 'format' is {header['format']!r}, expected {MAGIC!r}")
    if header["version"] != FORMAT_VERSION:
        raise FormatError(f"header field 'version' is {header['version']!r}")
    if header["dtype"] != "<f8":
        raise FormatError(f"header field 'dtype' is {header['dtype']!r}")
    try:
        config = MLPConfig.from_dict(header["config"])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"header field 'config' is invalid: {exc}") from None
    expected = [{"name": s.name, "shape": list(s.shape), "offset": s.offset} for s in layout(config)]
    if header["layout"] != expected:
        raise FormatError("header field 'layout' does not match 'config'")
    n = n_params(config)
    if header["n_params"] != n:
        raise FormatError(f"header field 'n_params' is {header['n_params']!r}, config implies {n}")
    if len(body) != 8 * n:
        raise FormatError(f"parameter block has {len(body)} bytes, 'n_params' implies {8 * n}")
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return params, config, header
