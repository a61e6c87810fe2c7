"""Seed derivation and counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by a
64-bit seed plus a 64-bit counter word, so a stream can be regenerated from
its key alone, in any order and on any thread.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed, *labels):
    """Derive a 64-bit sub-seed from ``seed`` and a sequence of labels."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed) & _MASK64).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


def philox(seed, counter=0):
    """Generator over Philox4x64 keyed by ``(seed, counter)``."""
    key = np.array([int(seed) & _MASK64, int(counter) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def stream(seed, *labels):
    """Generator keyed by a seed derived from ``seed`` and ``labels``."""
    return philox(derive_seed(seed, *labels))
