"""Counter-based random substreams.

Every randomized routine derives its generator from ``(seed, tag, index)`` so
that results depend only on the seed and the block schedule, never on how
blocks are distributed over threads.
"""
from __future__ import annotations

import zlib

import numpy as np


def _tag_key(tag: str | int) -> int:
    if isinstance(tag, int):
        return tag
    return zlib.crc32(tag.encode("utf-8"))


def substream(seed: int, tag: str | int = 0, index: int = 0) -> np.random.Generator:
    """Philox generator keyed by ``(seed, tag, index)``."""
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    ss = np.random.SeedSequence([int(seed), _tag_key(tag), int(index)])
    return np.random.Generator(np.random.Philox(ss))


def block_sizes(total: int, n_blocks: int) -> list[int]:
    """Split ``total`` into ``n_blocks`` near-equal nonnegative parts."""
    n_blocks = max(1, int(n_blocks))
    base, extra = divmod(int(total), n_blocks)
    return [base + (1 if i < extra else 0) for i in range(n_blocks)]
