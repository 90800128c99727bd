"""Counter-based random streams.

Every generator in the package draws from a Philox stream keyed by
``(seed, tag, *index)`` so that any column, realization or frame can be
regenerated on its own, independent of evaluation order or thread count.
"""

import numpy as np

# stream tags, one per consumer of randomness
IID = 1
MEMORY = 2
UNITARY = 3
EVOLVE = 4
DETECTOR = 5
REALIZATION = 6
COUPLING = 7
PROBE = 8


def stream(seed, tag, *index):
    """Return an independent ``numpy.random.Generator`` for the given key."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(tag), *[int(i) for i in index]]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def derive_seed(seed, tag, *index):
    """Derive a 64-bit child seed, e.g. one per realization of a sweep."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(tag), *[int(i) for i in index]]
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0])


def complex_normal(rng, shape, variance=1.0):
    """Circular complex Gaussian samples with ``E|z|^2 = variance``."""
    scale = np.sqrt(variance / 2.0)
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return scale * (re + 1j * im)
