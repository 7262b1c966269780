"""Named random streams derived from one root seed."""

import zlib

import numpy as np


def stream_seed(root: int, name: str) -> int:
    """A 63-bit seed for the stream ``name``, stable across processes and platforms."""
    seq = np.random.SeedSequence([int(root), zlib.crc32(name.encode("utf-8"))])
    return int(seq.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def rng_stream(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root, name))
