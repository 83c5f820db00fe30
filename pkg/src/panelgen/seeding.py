"""Counter-based random streams.

Every random draw in the pipeline comes from a Philox generator keyed by
(seed, purpose, index). Streams are independent of execution history, so a
resumed run at step s draws exactly what the uninterrupted run drew.
"""

from __future__ import annotations

import numpy as np

LANE_INIT = 1
LANE_DATA = 2
LANE_SAMPLE = 3
LANE_LORA = 4
LANE_TRAIN_STEP = 5
LANE_PROBE = 6
LANE_FUZZ = 7

_INDEX_BITS = 40


def rng_stream(seed: int, lane: int, index: int = 0) -> np.random.Generator:
    """Generator for stream (seed, lane, index); same triple, same stream."""
    if not 0 <= index < (1 << _INDEX_BITS):
        raise ValueError(f"stream index {index} out of range")
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64((lane << _INDEX_BITS) | index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
