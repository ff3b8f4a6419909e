"""Counter-based random streams.

Every stream is a Philox4x64 generator keyed by
``SeedSequence(entropy=base_seed, spawn_key=(index,))``, so path ``i`` of a
run draws the same numbers regardless of how paths are batched.
"""
import numpy as np

MASK64 = (1 << 64) - 1


def stream_key(base_seed, index=0):
    """The 128-bit Philox key for stream ``index`` as two uint64 words."""
    ss = np.random.SeedSequence(entropy=int(base_seed) & MASK64, spawn_key=(int(index),))
    return ss.generate_state(2, np.uint64)


def generator(base_seed, index=0):
    return np.random.Generator(np.random.Philox(key=stream_key(base_seed, index)))


def substream(base_seed, index, tag):
    """A second independent stream for the same path (e.g. the prior draw)."""
    ss = np.random.SeedSequence(entropy=int(base_seed) & MASK64, spawn_key=(int(index), int(tag)))
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))
