"""Deterministic random substreams.

Every stochastic component draws from a generator keyed by (master seed,
domain, *indices).  Streams depend only on their key, never on the order in
which they are created, so parallel evaluation and sequential evaluation
produce bit-identical results.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep substreams for unrelated purposes disjoint.
DOMAIN_NODE_SAMPLING = 1
DOMAIN_EDGE_MC = 2
DOMAIN_SIM_TICK = 3
DOMAIN_ROLLOUT_MC = 4
DOMAIN_LAZY_MC = 5
DOMAIN_INSERT_MC = 6
DOMAIN_RUN_INIT = 7


def substream(master_seed: int, *key: int) -> np.random.Generator:
    """Generator for the substream identified by (master_seed, *key).

    Keys must be non-negative integers.  The same key always yields the
    same stream regardless of call order or thread.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(master_seed), *map(int, key)])))
