"""Seed derivation.

Every random draw in the package comes from a numpy ``Generator`` backed by
PCG64.  A single top-level seed is expanded into per-stage sub-seeds with
``SeedSequence([seed, stage_id])`` so a stage can be rerun on its own and
still see the same stream.
"""

import numpy as np

RNG_ALGORITHM = "numpy.PCG64/SeedSequence"

STAGES = {
    "split": 1,
    "init_params": 2,
    "init_topics": 3,
    "sample_topics": 4,
    "gibbs": 5,
    "synthetic": 6,
}


def derive_seed(seed: int, stage: str, *path: int) -> int:
    """Return a 63-bit sub-seed for ``stage`` (and optional sub-indices) derived from ``seed``."""
    ss = np.random.SeedSequence([int(seed), STAGES[stage], *map(int, path)])
    hi, lo = (int(x) for x in ss.generate_state(2, dtype=np.uint32))
    return ((hi << 32) | lo) >> 1


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def stage_rng(seed: int, stage: str, *path: int) -> np.random.Generator:
    return make_rng(derive_seed(seed, stage, *path))
