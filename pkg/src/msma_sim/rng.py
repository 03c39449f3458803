"""Keyed random streams.

Every stochastic draw comes from a generator keyed by (seed, *keys), so the
draws of one agent at one tick never depend on what any other agent or tick
consumed. Streams use a counter-based bit generator by default.
"""
import zlib

import numpy as np

from .errors import ConfigError

GENERATORS = {
    "philox": np.random.Philox,
    "pcg64": np.random.PCG64,
}


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def rng_stream(seed, *keys, generator="philox"):
    """Independent numpy Generator for the given seed and key path."""
    try:
        bit_generator = GENERATORS[generator]
    except KeyError:
        raise ConfigError(f"unknown rng generator '{generator}' (choose from {sorted(GENERATORS)})")
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(k) for k in keys]
    return np.random.Generator(bit_generator(np.random.SeedSequence(entropy)))
