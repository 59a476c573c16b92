"""Seeded, splittable random streams.

All stochastic code in the toolkit draws from a counter-based Philox generator
keyed by a 64-bit seed plus a tuple of stream ids, so any component can derive
an independent stream that is reproducible across runs and across worker
threads (stream identity, not scheduling, determines the draw sequence).
"""

import numpy as np


def rng_stream(seed: int, *stream: int) -> np.random.Generator:
    """Return a Generator for the (seed, *stream) lane.

    Distinct stream tuples give statistically independent sequences; the same
    tuple always gives the identical sequence.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))
