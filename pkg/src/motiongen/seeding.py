"""Deterministic RNG substreams derived from a single root seed.

Every source of randomness in a run (data synthesis, parameter init, index
corruption, sampling, metric protocols, code reset) draws from its own named
substream so components can be varied independently without perturbing the
others.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(root_seed, name):
    """A numpy Generator seeded by (root_seed, crc32(name)); stable across runs."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng([int(root_seed) & 0xFFFFFFFF, tag])


def substream_seed(root_seed, name):
    """A derived 32-bit integer seed, for handing to nested runs."""
    tag = zlib.crc32(name.encode("utf-8"))
    mix = np.random.default_rng([int(root_seed) & 0xFFFFFFFF, tag])
    return int(mix.integers(0, 2**31 - 1))
