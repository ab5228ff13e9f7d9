"""Counter-based random streams.

Every consumer that must be reproducible independently of evaluation
order (SDF samples, voxel rays) derives its randomness from a hash of
(seed, index, ...) instead of a shared sequential generator.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def hash_u64(*parts) -> np.ndarray:
    """Combine integer scalars/arrays into one uint64 stream.

    Broadcasts like numpy; result shape is the broadcast shape of the
    inputs.
    """
    with np.errstate(over="ignore"):
        acc = np.asarray(np.uint64(0x5851F42D4C957F2D))
        for p in parts:
            p = np.asarray(p, dtype=np.uint64)
            acc = _mix(acc + _GOLDEN + p)
        return acc


def uniform01(*parts) -> np.ndarray:
    """Uniform floats in [0, 1) keyed by the given counters."""
    bits = hash_u64(*parts)
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def unit_vectors(*parts) -> np.ndarray:
    """Uniformly distributed unit vectors keyed by the given counters.

    Returns shape ``broadcast + (3,)``.
    """
    u = uniform01(*parts, 0)
    v = uniform01(*parts, 1)
    z = 2.0 * u - 1.0
    phi = 2.0 * np.pi * v
    s = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


def normal01(*parts) -> np.ndarray:
    """Standard normal samples keyed by the given counters (Box-Muller)."""
    u1 = uniform01(*parts, 2)
    u2 = uniform01(*parts, 3)
    u1 = np.maximum(u1, 1e-300)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
