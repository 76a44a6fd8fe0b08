"""Named deterministic random streams.

Every stochastic choice in the package draws from a stream identified by
(master seed, label). Streams are backed by Philox, a counter-based
generator, keyed by a hash of the seed/label pair, so any stream can be
reproduced in isolation without replaying the draws of the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, label: str) -> int:
    """128-bit Philox key derived from the master seed and a stream label."""
    digest = hashlib.sha256(f"{seed}\x1f{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, label: str) -> np.random.Generator:
    """Generator for the named stream. Same (seed, label) => same draws."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, label)))
