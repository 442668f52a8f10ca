"""Seeded random streams.

Every stream is numpy's Philox4x64-10 counter-based generator keyed through
``SeedSequence((seed, stream))``; Gaussian draws use numpy's ziggurat
sampler (``Generator.standard_normal``). Distinct ``stream`` tags keep,
e.g., the W* draw and the per-level noise draws independent even when they
share a user seed. Outputs are reproducible on a given numpy build; ports to
other generators are expected to agree only statistically.
"""

import numpy as np

STREAM_WSTAR = 0
STREAM_NOISE = 1
STREAM_DELTA = 2
STREAM_TOY = 3


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), int(stream)))))
