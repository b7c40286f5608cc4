"""Deterministic random-number plumbing.

Every stochastic component in the toolkit derives its generator from an
integer base seed plus a tuple of integer tags (epoch number, example
index, restart index, ...).  Derivation goes through numpy's SeedSequence
spawn keys, so streams for different tags are independent and a stream
can be reconstructed without replaying any other stream.
"""

from __future__ import annotations

import numpy as np

# Fixed tags so different consumers of the same base seed never collide.
TAG_SHUFFLE = 1
TAG_AUGMENT = 2
TAG_ATTACK_INIT = 3
TAG_INIT = 4
TAG_DIRECTION = 5


def derived_rng(base_seed: int, *tags: int) -> np.random.Generator:
    """Generator keyed by (base_seed, *tags); same inputs, same stream."""
    ss = np.random.SeedSequence(int(base_seed), spawn_key=tuple(int(t) for t in tags))
    return np.random.Generator(np.random.PCG64(ss))
