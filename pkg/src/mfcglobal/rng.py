"""Counter-based random streams.

Every variate is a pure function of ``(key, sample, step, player, component)``:
the counter is packed into 64 bits and pushed through the SplitMix64 output
function, so any sub-batch of samples, players or steps can be regenerated in
isolation and parallel workers never share generator state.

Counter packing (bits): sample 28 | step 20 | player 12 | component 4.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

from .errors import CapacityError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

MAX_SAMPLES = 1 << 28
MAX_STEPS = (1 << 20) - 1     # the top value is reserved for initial draws
MAX_PLAYERS = 1 << 12
MAX_COMPONENTS = 1 << 4
INIT_STEP = MAX_STEPS


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _C1
    z = (z ^ (z >> np.uint64(27))) * _C2
    return z ^ (z >> np.uint64(31))


def _mix_int(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_key(key: int, *labels) -> int:
    """Child key from a parent key and a path of ints or strings."""
    k = int(key) & _MASK64
    for label in labels:
        if isinstance(label, str):
            label = int.from_bytes(label.encode("utf-8")[:8].ljust(8, b"\0"), "little")
        k = _mix_int(k + 0x9E3779B97F4A7C15 * (int(label) + 1))
    return k


def _bits(key, samples, step, n_players, n_comp):
    samples = np.asarray(samples, dtype=np.int64)
    if samples.size and (samples.min() < 0 or samples.max() >= MAX_SAMPLES):
        raise CapacityError(f"sample index outside [0, {MAX_SAMPLES})")
    if not 0 <= step <= MAX_STEPS:
        raise CapacityError(f"step index outside [0, {MAX_STEPS}]")
    if n_players > MAX_PLAYERS or n_comp > MAX_COMPONENTS:
        raise CapacityError("too many players or components for the counter layout")
    s = samples.astype(np.uint64)[:, None, None] << np.uint64(36)
    p = np.arange(n_players, dtype=np.uint64)[None, :, None] << np.uint64(4)
    c = np.arange(n_comp, dtype=np.uint64)[None, None, :]
    counter = s | (np.uint64(step) << np.uint64(16)) | p | c
    return _mix(counter * _GOLDEN + np.uint64(key & _MASK64))


def uniforms(key: int, samples, step: int, n_players: int, n_comp: int) -> np.ndarray:
    """Open-interval uniforms of shape ``(len(samples), n_players, n_comp)``."""
    h = _bits(key, samples, step, n_players, n_comp)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def normals(key: int, samples, step: int, n_players: int, n_comp: int) -> np.ndarray:
    """Standard normals of shape ``(len(samples), n_players, n_comp)``."""
    return ndtri(uniforms(key, samples, step, n_players, n_comp))
