"""One independent RNG stream per (seed, purpose), so toggling one consumer
never shifts another's draws."""

import zlib

import numpy as np

PURPOSES = ("init", "independent-init", "data-order", "sample-set", "noise", "corruption", "augment", "bootstrap")


def stream(seed, purpose, *extra):
    if purpose not in PURPOSES:
        raise ValueError(f"unknown RNG purpose {purpose!r}")
    return np.random.default_rng([int(seed), zlib.crc32(purpose.encode()), *map(int, extra)])


def derived_seed(seed, purpose, *extra):
    return int(stream(seed, purpose, *extra).integers(0, 2**62))
