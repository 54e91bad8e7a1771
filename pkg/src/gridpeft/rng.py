"""Keyed counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, label, *counters)``, so a draw can be replayed without replaying
everything that came before it.
"""

import zlib

import numpy as np


def stream(seed, label, *counters):
    """Return a ``numpy.random.Generator`` for the key ``(seed, label, *counters)``."""
    seed = int(seed)
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = [seed & 0xFFFFFFFF, seed >> 32, zlib.crc32(label.encode("utf-8"))]
    key.extend(int(c) for c in counters)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal samples resampled until they fall within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std
