"""Counter-based deterministic random streams.

Every stochastic operation takes a generator built from ``(seed, stream)``;
the Philox key packs both, so distinct streams never overlap and a run is
reproducible bit for bit.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(stream) -> int:
    """Map an integer or a string label to a 64-bit stream id."""
    if isinstance(stream, str):
        return int.from_bytes(hashlib.blake2b(stream.encode(), digest_size=8).digest(), "little")
    return int(stream) & _MASK64


def make_rng(seed: int, stream=0) -> np.random.Generator:
    key = (stream_id(stream) << 64) | (int(seed) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


def substream(seed: int, *labels) -> np.random.Generator:
    """Generator for a nested label path, e.g. ``substream(seed, "drop", image_id)``."""
    return make_rng(seed, "/".join(str(label) for label in labels))
