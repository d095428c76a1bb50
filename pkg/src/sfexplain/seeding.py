"""Deterministic seed derivation.

Every source of randomness in the package is keyed off one top-level seed.
Sub-seeds are derived by feeding the base seed plus an integer path into
numpy's SeedSequence, so the mapping is documented, stable, and collision
resistant. Path constants used by the evaluation pipeline live here.
"""

from __future__ import annotations

import numpy as np

# Path tags for the evaluation pipeline.
TAG_EGMM = 1
TAG_ANALYST = 2
TAG_RANDOM_SFE = 3


def derive_seed(base: int, *path: int) -> int:
    """Derive a 64-bit sub-seed from ``base`` and an integer path."""
    state = np.random.SeedSequence([int(base), *map(int, path)]).generate_state(
        1, dtype=np.uint64
    )
    return int(state[0])
