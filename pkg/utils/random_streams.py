import logging
from typing import Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]

def make_rng(seed: SeedLike) -> np.random.Generator:
    """Return a Generator for an int seed, SeedSequence or existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)

def child_seed(seed: Optional[int], *keys: int) -> np.random.SeedSequence:
    """Derive a named sub-stream, e.g. ``child_seed(seed, recipe_no, trial)``."""
    return np.random.SeedSequence(seed, spawn_key=tuple(keys))
