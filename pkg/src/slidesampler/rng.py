"""Counter-based random streams.

Every random decision in the package draws from a Philox generator keyed by
a tuple such as ``(seed, "live", epoch, batch)``.  Any stream can therefore be
rebuilt on any worker without shared state.
"""

import hashlib

import numpy as np


def _as_word(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed, *keys):
    """Return a fresh ``numpy.random.Generator`` for the given key path."""
    words = [_as_word(seed)] + [_as_word(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
