"""Global approximation of mean field control value functions.

A near-optimal feedback control is learned for an N-player cooperative
particle system by Monte Carlo policy gradient, the N-player value function
is fitted by differential regression, and the mean-field value at any input
measure is recovered by quasi-Monte Carlo integration of the fitted value.
"""
from . import autodiff, bench, dynamics, measure, metrics, network, policy, rng, valuefit
from .errors import (CapacityError, ConfigError, DegenerateError, DimensionError, Diverged,
                     DomainError, FormatError, GraphError, MFCError, NumericError)

__version__ = "0.1.0"

__all__ = [
    "autodiff", "bench", "dynamics", "measure", "metrics", "network", "policy", "rng", "valuefit",
    "CapacityError", "ConfigError", "DegenerateError", "DimensionError", "Diverged", "DomainError",
    "FormatError", "GraphError", "MFCError", "NumericError",
]
