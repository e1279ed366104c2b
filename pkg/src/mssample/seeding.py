"""Deterministic seed derivation.

One master seed fans out into named substreams (so adding draws to one
purpose never shifts another) and into per-chain seeds (so chain k of a
batch reruns identically when launched alone with its derived seed).
"""

import numpy as np

PURPOSES = ("dataset", "stage1", "flow", "stage2", "baseline", "grid")


def substream_seed(master_seed, purpose) -> int:
    idx = PURPOSES.index(purpose)
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(idx,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def chain_seeds(seed, n_chains):
    ss = np.random.SeedSequence(int(seed))
    return [int(s) for s in ss.generate_state(n_chains, dtype=np.uint64)]
