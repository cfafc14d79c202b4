"""Named, splittable random streams.

Every stochastic operation draws from a generator keyed by
``(global_seed, purpose tag, *counters)``.  The key is mixed through
``numpy.random.SeedSequence`` and drives a Philox (counter-based) bit
generator, so a stream depends only on its name and never on how many
numbers other consumers have drawn.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_word(tag: str) -> int:
    # crc32 is stable across processes, unlike hash()
    return zlib.crc32(tag.encode("utf-8")) & 0xFFFFFFFF


def stream(seed: int, tag: str, *counters: int) -> np.random.Generator:
    """Return the generator for ``(seed, tag, *counters)``."""
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF, _tag_word(tag)]
    words.extend(int(c) & 0xFFFFFFFF for c in counters)
    ss = np.random.SeedSequence(words)
    return np.random.Generator(np.random.Philox(ss))
