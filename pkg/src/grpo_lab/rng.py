"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, trial)``; the draw index is
Philox's internal counter, so a trial's draws never depend on how trials are
scheduled.
"""

from __future__ import annotations

import numpy as np

MAX_SEED = 2**64 - 1


def make_stream(seed: int, trial: int = 0) -> np.random.Generator:
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    if trial < 0:
        raise ValueError(f"trial index must be >= 0, got {trial}")
    seq = np.random.SeedSequence(seed, spawn_key=(trial,))
    return np.random.Generator(np.random.Philox(seq))
