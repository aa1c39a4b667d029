"""Deterministic random substreams on a counter-based generator.

Every stochastic decision in a run draws from its own Philox substream keyed
by (seed, domain, loop, iteration, index), so the schedule of parallel workers
cannot change any result.
"""

from __future__ import annotations

import numpy as np

# Substream domains. Values are part of the on-disk reproducibility contract:
# changing them changes every run's bytes.
DOMAIN_INIT = 0          # initial policy collection / random-search draws
DOMAIN_SELECT = 1        # parent selection per iteration
DOMAIN_MUTATE = 2        # per-sample mutation noise
DOMAIN_MODEL_INIT = 3    # manifold model weight initialisation
DOMAIN_MODEL_TRAIN = 4   # epoch shuffling and splits during manifold fits


def substream(seed: int, domain: int, loop: int = 0, iteration: int = 0,
              index: int = 0) -> np.random.Generator:
    """Return the Generator for one (seed, domain, loop, iteration, index) key."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(domain, loop, iteration, index))
    return np.random.Generator(np.random.Philox(ss))
