"""Counter-based random substreams.

Every block of work draws from its own Philox stream keyed by
``(seed, stream, block)``, so results do not depend on how blocks are
scheduled across threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

BLOCK = 1 << 14


def substream(seed: int, stream: int, block: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def run_blocks(
    count: int,
    fn: Callable[[int, int], np.ndarray],
    workers: int = 1,
    block: int = BLOCK,
) -> np.ndarray:
    """Evaluate ``fn(block_index, size)`` over blocks covering ``count`` items.

    Results are concatenated in block order whatever ``workers`` is.
    """
    sizes = [min(block, count - a) for a in range(0, count, block)]
    if not sizes:
        return fn(0, 0)
    if workers <= 1 or len(sizes) == 1:
        parts = [fn(i, s) for i, s in enumerate(sizes)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(fn, range(len(sizes)), sizes))
    return np.concatenate(parts)
