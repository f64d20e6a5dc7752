"""Deterministic random-stream derivation.

Every random draw in the pipeline comes from a stream derived from the run
seed plus a structured key (domain constant + integers such as client id,
round, epoch, sample index). Streams are independent of execution order and
worker count, which is what makes runs replayable.
"""

from __future__ import annotations

import numpy as np

# Domain constants keep unrelated streams from colliding.
DOMAIN_DATA = 1
DOMAIN_PARTITION = 2
DOMAIN_MODEL_INIT = 3
DOMAIN_WARMUP = 4
DOMAIN_SHUFFLE = 5
DOMAIN_TRAIN_NOISE = 6
DOMAIN_SAMPLE = 7
DOMAIN_EVAL = 8
DOMAIN_CLASSIFIER = 9


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Return a generator for (seed, key), stable across processes."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *key: int) -> int:
    """Collapse (seed, key) into a single integer seed."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)
