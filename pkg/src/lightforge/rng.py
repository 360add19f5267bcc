"""Counter-based deterministic random streams.

A splitmix64-style integer hash turns (seed, key, key, ...) tuples into
uniform floats, so any pixel/sample/light combination can be evaluated on any
worker in any order and still produce identical results. Keys may be numpy
integer arrays; they broadcast like ufunc operands.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    # uint64 wraparound is the point; silence numpy's overflow warnings.
    with np.errstate(over="ignore"):
        x = (x + _GOLDEN) & _MASK
        x = ((x ^ (x >> np.uint64(30))) * _MIX1) & _MASK
        x = ((x ^ (x >> np.uint64(27))) * _MIX2) & _MASK
        return x ^ (x >> np.uint64(31))


def hash_u64(seed: int, *keys) -> np.ndarray:
    """Hash integer keys (scalars or broadcastable arrays) to uint64."""
    h = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    for k in keys:
        k = np.asarray(k, dtype=np.uint64)
        with np.errstate(over="ignore"):
            h = _mix(h ^ ((k * _GOLDEN) & _MASK))
    return h


def uniform(seed: int, *keys) -> np.ndarray:
    """Uniform floats in [0, 1) keyed by (seed, *keys); shape from broadcast."""
    return (hash_u64(seed, *keys) >> np.uint64(11)) * (2.0 ** -53)
