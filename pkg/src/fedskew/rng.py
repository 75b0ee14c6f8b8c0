"""Counter-based random stream derivation.

One root seed per experiment; every consumer gets an independent generator
keyed by (purpose, client, round) through ``SeedSequence`` spawn keys.
Client sampling, batch shuffling, gradient noise, and model init therefore
never share a stream, and results cannot depend on evaluation order or on
the number of parallel workers.
"""

from __future__ import annotations

import numpy as np

SAMPLING = 0
BATCH = 1
NOISE = 2
INIT = 3
DATA = 4


def stream(
    root_seed: int, purpose: int, client: int = 0, round_index: int = 0
) -> np.random.Generator:
    """Independent generator for (root_seed, purpose, client, round)."""
    seq = np.random.SeedSequence(
        root_seed, spawn_key=(purpose, client, round_index)
    )
    return np.random.default_rng(seq)
