"""Counter-based random streams.

Every source of randomness in the project is a Philox stream keyed by
(seed, purpose, index), so any piece of work — rendering one video,
augmenting one sample in one epoch — can be reproduced in isolation and
in parallel without shared-state ordering hazards.
"""

from __future__ import annotations

import numpy as np

# purpose tags; spread apart so (tag + index) never collides across purposes
FACTORS = 1 << 40
VIEWS = 2 << 40
VAL_VIEWS = 3 << 40
INIT = 4 << 40
SHUFFLE = 5 << 40
PROBE = 6 << 40

_MASK64 = (1 << 64) - 1


def stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    """Independent generator for (seed, purpose, index)."""
    key = np.array([int(seed) & _MASK64, (int(purpose) + int(index)) & _MASK64],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
