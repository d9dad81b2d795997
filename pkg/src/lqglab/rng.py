"""Counter-based random number streams for reproducible parallel Monte Carlo.

Every Monte Carlo sample ``i`` of an experiment draws from its own Philox
stream keyed by ``(master_seed, i)``.  Streams are independent of how samples
are distributed over workers, so results are bit-identical for any degree of
parallelism.
"""

from __future__ import annotations

import numpy as np


def sample_rng(master_seed: int, index: int = 0, tag: int = 0) -> np.random.Generator:
    """Generator for sample ``index`` of the stream ``master_seed``.

    ``tag`` separates independent sub-streams of the same sample (e.g. the
    driving path and an initial rotation).
    """
    packed = ((tag & 0xFF) << 56) | (index & 0x00FFFFFFFFFFFFFF)
    key = np.array([master_seed & 0xFFFFFFFFFFFFFFFF, packed], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def batch_rngs(master_seed: int, n: int, tag: int = 0) -> list:
    return [sample_rng(master_seed, i, tag) for i in range(n)]
