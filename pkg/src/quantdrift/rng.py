"""Counter-keyed random streams.

Every random quantity in the package is drawn from a generator keyed by
``(root seed, purpose tag, index...)``. Two computations that share a key see
the same numbers no matter how work is split across workers or in what order
it is executed.
"""
import zlib

import numpy as np

BLOCK = 4096


def tag_id(tag):
    """Stable 32-bit identifier for a purpose tag."""
    return zlib.crc32(tag.encode("utf-8"))


def keyed_generator(seed, tag, *index):
    """Return a Philox-backed generator for the key ``(seed, tag, *index)``."""
    if seed < 0 or any(i < 0 for i in index):
        raise ValueError("seed and indices must be non-negative")
    ss = np.random.SeedSequence([int(seed), tag_id(tag), *(int(i) for i in index)])
    return np.random.Generator(np.random.Philox(ss))


def keyed_uniforms(seed, tag, n, block=BLOCK):
    """Uniform draws in [0, 1) where element ``i`` depends only on ``(seed, tag, i)``.

    Elements are produced in blocks of ``block``; block ``b`` comes from the
    generator keyed ``(seed, tag, b)``, so any contiguous slice can be
    regenerated independently.
    """
    out = np.empty(n)
    for b in range(-(-n // block)):
        lo = b * block
        hi = min(n, lo + block)
        out[lo:hi] = keyed_generator(seed, tag, b).random(block)[: hi - lo]
    return out
